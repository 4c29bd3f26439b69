"""NV sensor eigensystem, renormalization and pure-dephasing models.

The working qubit of every sensor is the |0> <-> |+> transition, where |+>
is the upper strain-mixed eigenstate of the {|+1>, |-1>} manifold.  The
environment of a sensor (target electron and, optionally, the other NV
sensors) is described by a :class:`DephasingModel`: one Hamiltonian for each
sensor state plus the derived noise operator and free Hamiltonian.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .spin import (
    GAMMA_E,
    GAMMA_NV,
    ZFS,
    dipolar_prefactor,
    dipolar_tensor,
    embed,
    spin_operators,
)

AXIS_111 = tuple(np.ones(3) / np.sqrt(3.0))


def _unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("direction vector must be nonzero")
    return tuple(float(x) for x in v / n)


@dataclass(frozen=True)
class SensorConfig:
    """One NV sensor.  ``strain`` and ``zfs`` in rad/us, ``gamma`` in rad/(us G)."""

    id: str
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = AXIS_111
    strain: float = 0.0
    gamma: float = GAMMA_NV
    zfs: float = ZFS

    def __post_init__(self):
        if self.strain < 0:
            raise ValueError("strain must be non-negative")
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        object.__setattr__(self, "axis", _unit(self.axis))
        if self.zfs < 100 * self.strain:
            warnings.warn(f"sensor {self.id}: zero-field splitting is not >> strain", stacklevel=2)

    @property
    def pos(self) -> np.ndarray:
        return np.array(self.position)

    def frame(self) -> np.ndarray:
        """Rows are the sensor-frame unit vectors (x, y, z=axis) in lab coordinates."""
        z = np.array(self.axis)
        ref = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        x = np.cross(ref, z)
        x /= np.linalg.norm(x)
        return np.array([x, np.cross(z, x), z])

    def local(self, point) -> np.ndarray:
        """Displacement from the sensor to ``point`` in the sensor frame."""
        return self.frame() @ (np.asarray(point, dtype=float) - self.pos)

    def polar(self, point) -> tuple[float, float]:
        """(R, theta) of ``point`` relative to this sensor."""
        d = self.local(point)
        r = float(np.linalg.norm(d))
        return r, float(np.arccos(np.clip(d[2] / r, -1.0, 1.0)))


@dataclass(frozen=True)
class FieldConfig:
    """Static field of ``magnitude`` gauss; ``direction=None`` means along each sensor axis."""

    magnitude: float
    direction: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("field magnitude must be non-negative")
        if self.direction is not None:
            object.__setattr__(self, "direction", _unit(self.direction))

    def vector(self, sensor: SensorConfig) -> np.ndarray:
        """Field vector in the frame of ``sensor``."""
        if self.direction is None:
            return np.array([0.0, 0.0, self.magnitude])
        return sensor.frame() @ (self.magnitude * np.array(self.direction))


def larmor_nv(sensor: SensorConfig, field: FieldConfig) -> float:
    """omega_NV = |gamma_NV| B_parallel, using only the on-axis field."""
    return abs(sensor.gamma) * float(field.vector(sensor)[2])


def renormalization_factor(eps, omega_nv):
    """lambda = omega_NV / sqrt(eps^2 + omega_NV^2)."""
    eps = np.asarray(eps, dtype=float)
    omega_nv = np.asarray(omega_nv, dtype=float)
    if np.any((eps == 0) & (omega_nv == 0)):
        raise ValueError("renormalization factor undefined for zero strain and zero field")
    lam = omega_nv / np.hypot(eps, omega_nv)
    return float(lam) if lam.ndim == 0 else lam


@dataclass(frozen=True)
class NVEigensystem:
    energies: tuple[float, float, float]  # (E+, E0, E-), rad/us
    plus: np.ndarray  # components on (|+1>, |0>, |-1>)
    minus: np.ndarray
    lam: float
    splitting: float  # sqrt(eps^2 + omega_NV^2)

    @property
    def qubit_frequency(self) -> float:
        """|0> <-> |+> transition frequency."""
        return self.energies[0] - self.energies[1]


def nv_hamiltonian(sensor: SensorConfig, field: FieldConfig) -> np.ndarray:
    """Secular NV Hamiltonian in the (|+1>, |0>, |-1>) basis."""
    sx, sy, sz = spin_operators(1)
    b_par = float(field.vector(sensor)[2])
    return sensor.zfs * sz @ sz + sensor.strain * (sx @ sx - sy @ sy) - sensor.gamma * b_par * sz


def nv_eigensystem(sensor: SensorConfig, field: FieldConfig) -> NVEigensystem:
    eps = sensor.strain
    w = larmor_nv(sensor, field)
    e = float(np.hypot(eps, w))
    if e == 0.0:
        raise ValueError("degenerate |+1>, |-1> levels: strain and field both vanish")
    # (w + e, eps) and (-eps, w + e) are the analytic eigenvectors; the second
    # form avoids 0/0 for the lower state when eps -> 0.
    if w + e > 0:
        plus = np.array([w + e, 0.0, eps])
        minus = np.array([-eps, 0.0, w + e])
    else:
        plus = np.array([eps, 0.0, e - w])
        minus = np.array([w - e, 0.0, eps])
    # rescale before normalising; sqrt(2e(e +- w)) underflows for tiny splittings
    plus /= np.abs(plus).max()
    minus /= np.abs(minus).max()
    plus /= np.linalg.norm(plus)
    minus /= np.linalg.norm(minus)
    return NVEigensystem(
        energies=(sensor.zfs + e, 0.0, sensor.zfs - e),
        plus=plus.astype(complex),
        minus=minus.astype(complex),
        lam=w / e,
        splitting=e,
    )


@dataclass(frozen=True)
class BystanderSpin:
    """Another NV sensor seen from sensor ``i`` as an effective spin-1/2.

    The effective spin lives in {|+>_j, |->_j}; its splitting is
    ``frequency`` and the sensor feels the field ``a_z S_z + a_perp S_x``
    (before the sensor's own renormalization factor).
    """

    id: str
    frequency: float
    lam: float
    a_zz: float  # z.A_ij.z, rad/us
    coupling: float  # lambda_i lambda_j |z.A_ij.z|
    a_z: float
    a_perp: float


def effective_bystander_spin(sensor: SensorConfig, other: SensorConfig, field: FieldConfig) -> BystanderSpin:
    eig_i = nv_eigensystem(sensor, field)
    eig_j = nv_eigensystem(other, field)
    d = sensor.local(other.pos)
    tensor = dipolar_tensor(d, sensor.gamma, other.gamma)
    # both sensors quantized along their own axes; the secular term is z_i.A.z_j
    z_j = sensor.frame() @ np.array(other.axis)
    a_zz = float(np.array([0.0, 0.0, 1.0]) @ tensor.matrix @ z_j)
    r = float(np.linalg.norm(d))
    flip_flop = abs(dipolar_prefactor(sensor.gamma, other.gamma)) / r**3 / 2
    if abs(eig_i.splitting - eig_j.splitting) < 5 * flip_flop:
        warnings.warn(
            f"sensors {sensor.id}/{other.id}: strain splittings too close, flip-flops not suppressed",
            stacklevel=2,
        )
    # S_z of the spin-1 restricted to {|+1>, |-1>} is tau_z; in the strained
    # eigenbasis it becomes lam_j tau_z - (eps_j / E_j) tau_x.
    mix = other.strain / eig_j.splitting
    return BystanderSpin(
        id=other.id,
        frequency=2 * eig_j.splitting,
        lam=eig_j.lam,
        a_zz=a_zz,
        coupling=eig_i.lam * eig_j.lam * abs(a_zz),
        a_z=2 * eig_j.lam * a_zz,
        a_perp=2 * mix * abs(a_zz),
    )


@dataclass(frozen=True)
class TargetSpin:
    """Remote electron spin-1/2 at ``position`` (nm, lab frame)."""

    position: tuple[float, float, float]
    gamma: float = GAMMA_E

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))


@dataclass(frozen=True)
class DephasingModel:
    """Environment Hamiltonians conditioned on the sensor state.

    ``h_plus - h_zero = splitting + beta``; ``h_free = h_zero + beta / 2``.
    Matrices act on the environment space of dimension ``dim``.
    """

    h_plus: np.ndarray
    h_zero: np.ndarray
    beta: np.ndarray
    h_free: np.ndarray
    splitting: float
    lam: float
    labels: tuple[str, ...] = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.h_zero.shape[0]

    @property
    def noise(self) -> np.ndarray:
        """Linear noise field h (beta = lam h without the quadratic term)."""
        return self.beta / self.lam if self.lam else np.zeros_like(self.beta)


def build_dephasing_model(
    sensor: SensorConfig,
    field: FieldConfig,
    target: TargetSpin | None = None,
    bystanders=(),
    quadratic_term: bool = False,
) -> DephasingModel:
    """Pure-dephasing environment for ``sensor``: target electron plus bystander sensors.

    Bystanders are unpolarized effective spins (see :func:`effective_bystander_spin`).
    The quadratic ``h^2 / 2E`` correction is added only when ``quadratic_term`` is set.
    """
    eig = nv_eigensystem(sensor, field)
    sx, sy, sz = spin_operators(0.5)
    parts = []  # (label, free Hamiltonian, noise field) on a single spin-1/2
    if target is not None:
        d = sensor.local(target.position)
        if np.linalg.norm(d) == 0:
            raise ValueError("target coincides with the sensor")
        a = dipolar_tensor(d, sensor.gamma, target.gamma).projection()
        b = field.vector(sensor)
        h_tar = -target.gamma * (b[0] * sx + b[1] * sy + b[2] * sz)
        parts.append(("target", h_tar, a[0] * sx + a[1] * sy + a[2] * sz))
    for other in bystanders:
        bs = effective_bystander_spin(sensor, other, field)
        parts.append((f"nv:{bs.id}", bs.frequency * sz, bs.a_z * sz + bs.a_perp * sx))

    dims = [2] * len(parts)
    dim = 2 ** len(parts)
    h_env = np.zeros((dim, dim), dtype=complex)
    h = np.zeros((dim, dim), dtype=complex)
    for k, (_, h_k, n_k) in enumerate(parts):
        h_env += embed(h_k, k, dims)
        h += embed(n_k, k, dims)
    beta = eig.lam * h
    if quadratic_term:
        beta = beta + h @ h / (2 * eig.splitting)
    return DephasingModel(
        h_plus=h_env + eig.splitting * np.eye(dim) + beta,
        h_zero=h_env,
        beta=beta,
        h_free=h_env + beta / 2,
        splitting=eig.splitting,
        lam=eig.lam,
        labels=tuple(p[0] for p in parts),
    )
