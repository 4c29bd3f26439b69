"""Dynamical-decoupling schedules, modulation functions and filter functions.

Pulses are ideal instantaneous pi flips.  For CPMG-N the k-th pulse sits at
``t_k = (2k - 1) t / 2N``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PulseSequence:
    family: str
    n_pulses: int
    total_time: float
    pulse_times: tuple[float, ...]
    note: str = ""

    @property
    def edges(self) -> np.ndarray:
        """Interval boundaries ``[0, t_1, ..., t_N, t]``."""
        return np.concatenate(([0.0], self.pulse_times, [self.total_time]))

    @property
    def tau(self) -> float:
        """Half the inter-pulse delay (``2 tau = t / N``)."""
        return self.total_time / (2 * self.n_pulses)


def cpmg_times(n: int, t: float) -> PulseSequence:
    if n < 1:
        raise ValueError("CPMG needs at least one pulse")
    if t <= 0:
        raise ValueError("total time must be positive")
    k = np.arange(1, n + 1)
    times = (2 * k - 1) * t / (2 * n)
    return PulseSequence("CPMG", int(n), float(t), tuple(float(x) for x in times))


def xy8_times(k: int, t: float) -> PulseSequence:
    """XY8-k with ideal pulses has the same timing as CPMG-8k."""
    seq = cpmg_times(8 * k, t)
    return PulseSequence(seq.family, seq.n_pulses, seq.total_time, seq.pulse_times, note=f"XY8-{k}")


def make_sequence(family: str, n: int, t: float) -> PulseSequence:
    family = family.upper()
    if family == "CPMG":
        return cpmg_times(n, t)
    if family == "XY8":
        return xy8_times(n, t)
    raise ValueError(f"unknown sequence family {family!r}")


def modulation_function(seq: PulseSequence, t_prime):
    """Sign of the sensor's noise coupling at ``t_prime``; right-continuous at pulses."""
    tp = np.asarray(t_prime, dtype=float)
    if np.any((tp < 0) | (tp > seq.total_time)):
        raise ValueError("time outside the sequence")
    k = np.searchsorted(np.asarray(seq.pulse_times), tp, side="right")
    f = np.where(k % 2 == 0, 1, -1)
    return int(f) if f.ndim == 0 else f


def filter_function_direct(seq: PulseSequence, omega):
    """F = |sum_k (-1)^k (exp(i w t_{k+1}) - exp(i w t_k))| by explicit summation."""
    omega = np.asarray(omega, dtype=float)
    edges = seq.edges
    signs = (-1.0) ** np.arange(len(edges) - 1)
    phase = np.exp(1j * omega[..., None] * edges)
    total = np.sum(signs * (phase[..., 1:] - phase[..., :-1]), axis=-1)
    out = np.abs(total)
    return float(out) if out.ndim == 0 else out


def _dirichlet(n: int, y):
    """|sin(n y) / sin(y)| summed as a cosine series (finite at y = 0)."""
    k = np.arange(n)
    return np.abs(np.sum(np.cos(np.multiply.outer(y, n - 1 - 2 * k)), axis=-1))


def cpmg_filter(omega, t, n: int):
    """Closed-form CPMG-n filter function; broadcasts over ``omega`` and ``t``.

    odd n:  4 sin^2(wt/4n) |cos(wt/2) / cos(wt/2n)|
    even n: 4 sin^2(wt/4n) |sin(wt/2) / cos(wt/2n)|
    Where cos(wt/2n) ~ 0 the ratio is evaluated as a Dirichlet kernel.
    """
    x = np.asarray(omega, dtype=float) * np.asarray(t, dtype=float) / (2 * n)
    envelope = 4.0 * np.sin(x / 2) ** 2
    num = np.cos(n * x) if n % 2 else np.sin(n * x)
    den = np.cos(x)
    near = np.abs(den) < 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(num / den)
    if np.any(near):
        y = x[near] if x.ndim else x
        y = y - np.pi / 2 - np.pi * np.round((y - np.pi / 2) / np.pi)
        if x.ndim:
            ratio[near] = _dirichlet(n, y)
        else:
            ratio = _dirichlet(n, y)
    out = envelope * ratio
    return float(out) if np.ndim(out) == 0 else out


def filter_function(seq: PulseSequence, omega):
    """Filter function of ``seq`` at angular frequency ``omega``."""
    if seq.family == "CPMG":
        return cpmg_filter(omega, seq.total_time, seq.n_pulses)
    return filter_function_direct(seq, omega)
