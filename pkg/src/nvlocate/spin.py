"""Spin matrices, propagators and magnetic dipolar couplings.

Unit conventions used throughout the package:

* length in nm, time in us, magnetic field in gauss;
* every frequency handled internally is an angular frequency in rad/us;
* tabulated linear frequencies (MHz, MHz/G) are converted with ``2*pi`` on
  ingestion via :func:`to_angular`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import constants

TWO_PI = 2.0 * np.pi

# tabulated linear values; *_MHZ in MHz, *_MHZ_PER_G in MHz/G
ZFS_MHZ = 2870.0
GAMMA_NV_MHZ_PER_G = -2.8
GAMMA_C13_MHZ_PER_G = 1.0705e-3


def _scalar_or_array(x):
    return float(x) if x.ndim == 0 else x


def to_angular(f_mhz):
    """Linear frequency (MHz or MHz/G) -> angular (rad/us or rad/(us G))."""
    return _scalar_or_array(TWO_PI * np.asarray(f_mhz, dtype=float))


def to_linear(w):
    """Inverse of :func:`to_angular`."""
    return _scalar_or_array(np.asarray(w, dtype=float) / TWO_PI)


ZFS = to_angular(ZFS_MHZ)
GAMMA_NV = to_angular(GAMMA_NV_MHZ_PER_G)
GAMMA_E = GAMMA_NV  # target electron taken with the NV gyromagnetic ratio
GAMMA_C13 = to_angular(GAMMA_C13_MHZ_PER_G)

# rad/(us G) -> rad/(s T)
_GAMMA_SI = 1e6 / 1e-4


def dipolar_prefactor(gamma1: float, gamma2: float) -> float:
    """mu0 hbar gamma1 gamma2 / 4pi in rad/us * nm^3."""
    si = constants.mu_0 / (4 * np.pi) * constants.hbar * (gamma1 * _GAMMA_SI) * (gamma2 * _GAMMA_SI)
    # rad/s * m^3 -> rad/us * nm^3
    return si * 1e-6 * 1e27


def spin_operators(s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Sx, Sy, Sz) for spin 1/2 or spin 1, basis ordered m = s, ..., -s."""
    if np.isclose(s, 0.5):
        sx = np.array([[0, 1], [1, 0]], dtype=complex) / 2
        sy = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
        sz = np.diag([0.5, -0.5]).astype(complex)
    elif np.isclose(s, 1.0):
        sx = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / np.sqrt(2)
        sy = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / np.sqrt(2)
        sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    else:
        raise ValueError(f"unsupported spin quantum number {s!r}; expected 1/2 or 1")
    return sx, sy, sz


def kron_all(ms) -> np.ndarray:
    """Kronecker product of the matrices in order."""
    ms = list(ms)
    if not ms:
        raise ValueError("kron_all needs at least one matrix")
    return reduce(np.kron, ms)


def embed(op: np.ndarray, index: int, dims) -> np.ndarray:
    """Place ``op`` on subsystem ``index`` of a product space with ``dims``."""
    return kron_all([op if k == index else np.eye(d) for k, d in enumerate(dims)])


def check_hermitian(h: np.ndarray, rtol: float = 1e-12) -> None:
    h = np.asarray(h)
    scale = max(1.0, float(np.abs(h).max(initial=0.0)))
    if np.abs(h - h.conj().T).max(initial=0.0) > rtol * scale:
        raise ValueError("Hamiltonian is not Hermitian")


def propagator(h: np.ndarray, t: float) -> np.ndarray:
    """exp(-i H t) for Hermitian H (rad/us) and t (us)."""
    h = np.asarray(h, dtype=complex)
    check_hermitian(h)
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * t)) @ v.conj().T


@dataclass(frozen=True)
class DipolarTensor:
    """Point-dipole coupling tensor, ``H = S1 . matrix . S2``, in rad/us."""

    matrix: np.ndarray
    gamma1: float
    gamma2: float
    displacement: np.ndarray

    def projection(self, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
        """Row ``axis . A`` (the field seen by a spin quantized along ``axis``)."""
        return np.asarray(axis, dtype=float) @ self.matrix


def dipolar_tensor(r_vec, gamma1: float, gamma2: float) -> DipolarTensor:
    r_vec = np.asarray(r_vec, dtype=float)
    r = float(np.linalg.norm(r_vec))
    if r == 0.0:
        raise ValueError("dipolar coupling is singular at zero displacement")
    n = r_vec / r
    a = dipolar_prefactor(gamma1, gamma2) / r**3 * (np.eye(3) - 3.0 * np.outer(n, n))
    return DipolarTensor(a, gamma1, gamma2, r_vec.copy())


def dipolar_components(r, theta, gamma1: float, gamma2: float, lam=1.0):
    """Longitudinal and transverse coupling (A_z, A_perp) in rad/us.

    ``theta`` is the angle between the displacement and the quantization
    axis.  ``lam`` multiplies both components.  Broadcasts over arrays.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("distance must be positive")
    c = dipolar_prefactor(gamma1, gamma2) * lam / r**3
    cos = np.cos(theta)
    a_z = c * (1.0 - 3.0 * cos**2)
    a_perp = np.abs(3.0 * c * np.sin(theta) * cos)
    if a_z.ndim == 0:
        return float(a_z), float(a_perp)
    return a_z, a_perp
