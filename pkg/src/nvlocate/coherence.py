"""Sensor coherence under DD control.

Three engines are provided:

``exact``
    bifurcated evolution of the environment, ``L = Tr[U0^dag U+] / d``, with
    U+ (U0) starting under the Hamiltonian of the sensor state |+> (|0>) and
    switching at every pulse.  Independent spin-1/2 environments are handled
    with a vectorized SU(2) product; anything else uses dense propagators.
``magnus``
    first-order Magnus closed form ``cos(lam A_perp F(w', t) / 2 w')``.
``semiclassical``
    Gaussian noise with a discrete line spectrum,
    ``L = exp(-sum_k w_k F^2(w_k, t) / (4 pi w_k^2))``.

All frequencies are angular (rad/us), times in us.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nv import (
    DephasingModel,
    FieldConfig,
    SensorConfig,
    TargetSpin,
    build_dephasing_model,
    effective_bystander_spin,
    nv_eigensystem,
)
from .sequences import PulseSequence, cpmg_filter, filter_function, make_sequence
from .spin import dipolar_tensor, propagator

MAX_DENSE_DIM = 4096
ENGINES = ("exact", "magnus", "semiclassical")


# --------------------------------------------------------------------------- spectra


@dataclass(frozen=True)
class NoiseSpectrum:
    """Line spectrum C(w) = sum_k weights[k] delta(w - frequencies[k])."""

    frequencies: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if f.shape != w.shape:
            raise ValueError("frequencies and weights differ in length")
        if np.any(w < 0):
            raise ValueError("spectral weights must be non-negative")
        lines = np.array(sorted(zip(f, w)))
        mirrored = np.array(sorted(zip(-f, w)))
        if len(f) and not np.allclose(lines, mirrored):
            raise ValueError("spectrum must be symmetric under w -> -w")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "weights", w)

    def __add__(self, other: NoiseSpectrum) -> NoiseSpectrum:
        return NoiseSpectrum(
            np.concatenate([self.frequencies, other.frequencies]),
            np.concatenate([self.weights, other.weights]),
        )

    @classmethod
    def empty(cls) -> NoiseSpectrum:
        return cls(np.zeros(0), np.zeros(0))


def target_noise_spectrum(a_z: float, a_perp: float, lam: float, omega_e: float) -> NoiseSpectrum:
    """Weak-coupling spectrum of a precessing spin: lines at +-(w_e + lam A_z / 2)."""
    if np.hypot(a_z, a_perp) * abs(lam) > 0.1 * abs(omega_e):
        warnings.warn("coupling is not weak compared with the Larmor frequency", stacklevel=2)
    if a_perp == 0:
        return NoiseSpectrum.empty()
    w = omega_e + lam * a_z / 2
    weight = np.pi / 4 * (lam * a_perp) ** 2
    return NoiseSpectrum(np.array([w, -w]), np.array([weight, weight]))


def spectrum_from_model(model: DephasingModel, floor: float = 1e-12) -> NoiseSpectrum:
    """Exact line spectrum (2 pi / d) |beta_mn|^2 at w_mn = E_m - E_n of ``h_free``.

    Lines with |w_mn| <= ``floor`` are dropped (static noise is refocused).
    """
    e, v = np.linalg.eigh(model.h_free)
    b = v.conj().T @ model.beta @ v
    w = e[:, None] - e[None, :]
    weight = 2 * np.pi / model.dim * np.abs(b) ** 2
    keep = (np.abs(w) > floor) & (weight > 0)
    return NoiseSpectrum(w[keep], weight[keep])


# --------------------------------------------------------------------------- engines


def semiclassical_decay(spec: NoiseSpectrum, n: int, times) -> np.ndarray:
    """Gaussian-noise coherence for CPMG-n at each of ``times``."""
    if np.any(spec.frequencies == 0):
        raise ValueError("zero-frequency line: remove static noise before filtering")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    w = spec.frequencies
    f = cpmg_filter(w[None, :], times[:, None], n)
    exponent = -np.sum(spec.weights * f**2 / w**2, axis=1) / (4 * np.pi)
    return np.exp(exponent)


def coherence_semiclassical(spec: NoiseSpectrum, seq: PulseSequence) -> float:
    if np.any(spec.frequencies == 0):
        raise ValueError("zero-frequency line: remove static noise before filtering")
    if len(spec.frequencies) == 0:
        return 1.0
    f = np.asarray(filter_function(seq, spec.frequencies))
    return float(np.exp(-np.sum(spec.weights * f**2 / spec.frequencies**2) / (4 * np.pi)))


def magnus_decay(a_z, a_perp, lam, omega_e, n: int, times):
    """First-order Magnus coherence; broadcasts over all arguments."""
    w = omega_e + lam * a_z / 2
    return np.cos(lam * a_perp / (2 * w) * cpmg_filter(w, times, n))


def coherence_magnus(a_z, a_perp, lam, omega_e, seq: PulseSequence) -> float:
    w = omega_e + lam * a_z / 2
    return float(np.cos(lam * a_perp / (2 * w) * filter_function(seq, w)))


# SU(2) elements are stored as quaternions (q0, q) meaning q0 I - i q.sigma.


def _qexp(v, dt):
    """exp(-i (v.sigma/2) dt) for rotation vectors ``v`` (..., 3)."""
    v = np.asarray(v, dtype=float)
    dt = np.asarray(dt, dtype=float)
    norm = np.linalg.norm(v, axis=-1)
    half = norm * dt / 2
    s = (dt / 2) * np.sinc(half / np.pi)
    return np.cos(half), v * s[..., None]


def _qmul(a, b):
    """Quaternion of the product ``U_a @ U_b``."""
    a0, av = a
    b0, bv = b
    return (
        a0 * b0 - np.sum(av * bv, axis=-1),
        a0[..., None] * bv + b0[..., None] * av + np.cross(av, bv),
    )


def _qpow(q, m: int):
    result = (np.ones_like(q[0]), np.zeros_like(q[1]))
    base = q
    while m:
        if m & 1:
            result = _qmul(base, result)
        m >>= 1
        if m:
            base = _qmul(base, base)
    return result


def _branch(first, second, tau, n: int):
    """Propagator of CPMG-n for an environment switching ``first`` -> ``second`` at each pulse."""
    a1 = _qexp(first, tau)
    b2 = _qexp(second, 2 * tau)
    period = _qmul(a1, _qmul(b2, a1))
    u = _qpow(period, n // 2)
    if n % 2:
        u = _qmul(_qexp(second, tau), _qmul(a1, u))
    return u


def su2_decay(v_plus, v_zero, n: int, times):
    """Exact coherence for a spin-1/2 environment with traceless Hamiltonians.

    ``v_plus`` and ``v_zero`` are the rotation vectors (H = v.S) for the
    sensor in |+> and |0>; they broadcast against ``times``.
    """
    times = np.asarray(times, dtype=float)
    v_plus = np.asarray(v_plus, dtype=float)
    v_zero = np.asarray(v_zero, dtype=float)
    tau = times / (2 * n)
    shape = np.broadcast_shapes(v_plus.shape[:-1], v_zero.shape[:-1], tau.shape)
    tau = np.broadcast_to(tau, shape)
    v_plus = np.broadcast_to(v_plus, shape + (3,))
    v_zero = np.broadcast_to(v_zero, shape + (3,))
    p0, p = _branch(v_zero, v_plus, tau, n)
    q0, q = _branch(v_plus, v_zero, tau, n)
    return p0 * q0 + np.sum(p * q, axis=-1)


def _dense_branch(first: np.ndarray, second: np.ndarray, edges: np.ndarray) -> np.ndarray:
    cache: dict[tuple[int, float], np.ndarray] = {}
    u = np.eye(first.shape[0], dtype=complex)
    for k, dt in enumerate(np.diff(edges)):
        key = (k % 2, round(float(dt), 12))
        if key not in cache:
            cache[key] = propagator(first if k % 2 == 0 else second, dt)
        u = cache[key] @ u
    return u


def coherence_quantum_exact(model: DephasingModel, seq: PulseSequence) -> float:
    """L = Re Tr[U0^dag U+] / d by dense evolution (any sequence)."""
    if model.dim > MAX_DENSE_DIM:
        raise ValueError(f"environment dimension {model.dim} exceeds the dense limit {MAX_DENSE_DIM}")
    if seq.total_time == 0:
        return 1.0
    h_a = model.h_zero + model.beta
    u_plus = _dense_branch(h_a, model.h_zero, seq.edges)
    u_zero = _dense_branch(model.h_zero, h_a, seq.edges)
    value = np.trace(u_zero.conj().T @ u_plus) / model.dim
    return float(value.real)


def dense_decay(model: DephasingModel, n: int, times) -> np.ndarray:
    """Dense exact engine for CPMG-n over many times (period-power evolution)."""
    if model.dim > MAX_DENSE_DIM:
        raise ValueError(f"environment dimension {model.dim} exceeds the dense limit {MAX_DENSE_DIM}")
    h_a = model.h_zero + model.beta
    ea, va = np.linalg.eigh(h_a)
    eb, vb = np.linalg.eigh(model.h_zero)

    def u(e, v, dt):
        return (v * np.exp(-1j * e * dt)) @ v.conj().T

    out = np.empty(len(times))
    for i, t in enumerate(np.asarray(times, dtype=float)):
        if t == 0:
            out[i] = 1.0
            continue
        tau = t / (2 * n)
        ua, ub = u(ea, va, tau), u(eb, vb, tau)
        ua2, ub2 = ua @ ua, ub @ ub
        plus = np.linalg.matrix_power(ua @ ub2 @ ua, n // 2)
        zero = np.linalg.matrix_power(ub @ ua2 @ ub, n // 2)
        if n % 2:
            plus = ub @ ua @ plus
            zero = ua @ ub @ zero
        out[i] = (np.trace(zero.conj().T @ plus) / model.dim).real
    return out


# --------------------------------------------------------------------------- predictions


@dataclass(frozen=True)
class DipPrediction:
    order: int
    time: float
    depth: float


def dip_time(n: int, q: int, omega_e: float, lam: float, a_z: float) -> float:
    """t_dip = pi (2q - 1) n / (w_e + lam A_z / 2)."""
    w = omega_e + lam * a_z / 2
    if np.any(np.asarray(w) <= 0):
        raise ValueError("shifted Larmor frequency must be positive")
    return np.pi * (2 * q - 1) * n / w


def dip_depth(n: int, a_z, a_perp, lam, omega_e, mode: str = "quantum"):
    w = omega_e + lam * a_z / 2
    x = lam * a_perp * n / w
    if mode == "quantum":
        return np.cos(x)
    if mode == "semiclassical":
        return np.exp(-(x**2) / 2)
    raise ValueError(f"unknown dip-depth mode {mode!r}")


def predict_dip(n: int, q: int, a_z, a_perp, lam, omega_e, mode: str = "quantum") -> DipPrediction:
    return DipPrediction(q, dip_time(n, q, omega_e, lam, a_z), float(dip_depth(n, a_z, a_perp, lam, omega_e, mode)))


# --------------------------------------------------------------------------- scenarios and curves


@dataclass(frozen=True)
class Scenario:
    """Everything one sensor sees: target, other sensors, optional 13C bath."""

    sensor: SensorConfig
    field: FieldConfig
    target: TargetSpin | None = None
    bystanders: tuple[SensorConfig, ...] = ()
    bath: object | None = None  # nvlocate.bath.BathRealization
    quadratic_term: bool = False

    def model(self) -> DephasingModel:
        return build_dephasing_model(self.sensor, self.field, self.target, self.bystanders, self.quadratic_term)

    def describe(self) -> dict:
        d = {
            "sensor": self.sensor.id,
            "strain": self.sensor.strain,
            "field_gauss": self.field.magnitude,
            "target": list(self.target.position) if self.target else None,
            "bystanders": [b.id for b in self.bystanders],
            "bath": None if self.bath is None else self.bath.summary(),
        }
        if self.target is not None:
            r, th = self.sensor.polar(self.target.position)
            d["target_r_nm"], d["target_theta_deg"] = r, float(np.degrees(th))
        return d


@dataclass(frozen=True)
class SpinTerm:
    """One independent environment spin-1/2: free rotation vector and bare noise vector."""

    label: str
    free: np.ndarray
    noise: np.ndarray

    def components(self, lam: float) -> tuple[float, float, float]:
        """(A_z, A_perp, w) along the spin's own precession axis."""
        w = float(np.linalg.norm(self.free))
        axis = self.free / w if w else np.array([0.0, 0.0, 1.0])
        a_z = float(self.noise @ axis)
        a_perp = float(np.linalg.norm(self.noise - a_z * axis))
        return a_z, a_perp, w


def spin_terms(scenario: Scenario) -> list[SpinTerm]:
    terms = []
    s = scenario.sensor
    if scenario.target is not None:
        a = dipolar_tensor(s.local(scenario.target.position), s.gamma, scenario.target.gamma).projection()
        terms.append(SpinTerm("target", -scenario.target.gamma * scenario.field.vector(s), a))
    for other in scenario.bystanders:
        bs = effective_bystander_spin(s, other, scenario.field)
        terms.append(SpinTerm(f"nv:{bs.id}", np.array([0.0, 0.0, bs.frequency]), np.array([bs.a_perp, 0.0, bs.a_z])))
    return terms


@dataclass
class CoherenceCurve:
    times: np.ndarray
    values: np.ndarray
    engine: str
    scenario: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    def to_csv(self, path) -> None:
        """CSV with columns ``t_us, L``; metadata goes in leading ``#`` lines."""
        with open(path, "w", newline="") as fh:
            meta = {"engine": self.engine, "scenario": self.scenario, **self.metadata}
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_us", "L"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> CoherenceCurve:
        meta: dict = {}
        rows = []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    meta.update(json.loads(line[1:]))
                    continue
                rows.append(line)
        reader = csv.DictReader(rows)
        data = [(float(r["t_us"]), float(r["L"])) for r in reader]
        t, v = (np.array(x) for x in zip(*data)) if data else (np.zeros(0), np.zeros(0))
        engine = meta.pop("engine", "external")
        scenario = meta.pop("scenario", {})
        return cls(t, v, engine, scenario, meta)

    def to_json(self, path) -> None:
        doc = {
            "engine": self.engine,
            "scenario": self.scenario,
            "metadata": self.metadata,
            "t_us": self.times.tolist(),
            "L": self.values.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)


def coherence_values(scenario: Scenario, n: int, times, engine: str = "exact", dense: bool = False) -> np.ndarray:
    """Target/bystander coherence for CPMG-n at ``times`` (bath not included)."""
    times = np.asarray(times, dtype=float)
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    lam = nv_eigensystem(scenario.sensor, scenario.field).lam
    terms = spin_terms(scenario)
    out = np.ones_like(times)
    if not terms:
        return out
    if engine == "exact" and (dense or scenario.quadratic_term):
        return dense_decay(scenario.model(), n, times)
    if engine == "semiclassical":
        spec = NoiseSpectrum.empty()
        for term in terms:
            spec = spec + _term_spectrum(term, lam)
        return semiclassical_decay(spec, n, times) if len(spec.frequencies) else out
    for term in terms:
        if engine == "exact":
            out = out * su2_decay(term.free + lam * term.noise, term.free, n, times)
        else:
            a_z, a_perp, w = term.components(lam)
            out = out * magnus_decay(a_z, a_perp, lam, w, n, times)
    return out


def _term_spectrum(term: SpinTerm, lam: float) -> NoiseSpectrum:
    a_z, a_perp, w = term.components(lam)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return target_noise_spectrum(a_z, a_perp, lam, w)


def coherence_curve(
    scenario: Scenario,
    n: int,
    times,
    engine: str = "exact",
    family: str = "CPMG",
    bath_pairs=None,
) -> CoherenceCurve:
    """Sampled L(t); a bath, if present, multiplies in as an independent factor."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be increasing")
    n_eff = make_sequence(family, n, 1.0).n_pulses
    values = coherence_values(scenario, n_eff, times, engine)
    meta = {"n_pulses": n_eff, "family": family.upper()}
    if scenario.bath is not None:
        from .bath import cce2_decay

        values = values * cce2_decay(scenario.bath, n_eff, times, pairs=bath_pairs)
    return CoherenceCurve(times, values, engine, scenario.describe(), meta)
