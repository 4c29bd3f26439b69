"""13C nuclear spin bath on the diamond lattice and its CCE-2 decoherence.

The bath is treated in the secular approximation: each nucleus couples to
the sensor through the zz hyperfine component only, and nuclear pairs keep
the flip-flop conserving part of their dipolar coupling.  Under balanced DD
the single-spin clusters are then trivial and a pair reduces to a pseudospin
in {|ud>, |du>} driven by ``delta tau_z + b tau_x`` (sensor in |+>) or
``b tau_x`` (sensor in |0>).
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coherence import CoherenceCurve, su2_decay
from .nv import DephasingModel, FieldConfig, SensorConfig, nv_eigensystem
from .spin import GAMMA_C13, TWO_PI, dipolar_prefactor, embed, spin_operators

LATTICE_CONSTANT = 0.357  # nm
NATURAL_ABUNDANCE = 0.011
COUPLING_FLOOR = TWO_PI * 1e-6  # 1 Hz in rad/us
CHUNK = 2048  # fixed so that results do not depend on the thread count

_BASIS = np.array(
    [
        [0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0],
        [1, 1, 1], [1, 3, 3], [3, 1, 3], [3, 3, 1],
    ]
) / 4.0


def diamond_sites(cutoff: float, a: float = LATTICE_CONSTANT) -> np.ndarray:
    """Carbon sites within ``cutoff`` of a vacancy at the origin, nitrogen at a(1,1,1)/4 removed.

    Sites are returned in a fixed order (by cell index, then basis index).
    """
    m = int(np.ceil(cutoff / a)) + 1
    cells = np.arange(-m, m + 1)
    grid = np.stack(np.meshgrid(cells, cells, cells, indexing="ij"), axis=-1).reshape(-1, 1, 3)
    sites = ((grid + _BASIS[None, :, :]) * a).reshape(-1, 3)
    r = np.linalg.norm(sites, axis=1)
    nitrogen = np.all(np.isclose(sites, a / 4), axis=1)
    return sites[(r <= cutoff) & (r > 0) & ~nitrogen]


@dataclass
class BathRealization:
    """One random 13C configuration around a sensor (positions in the sensor frame)."""

    seed: int
    abundance: float
    cutoff: float
    lattice_constant: float
    positions: np.ndarray  # (n, 3) nm
    hyperfine: np.ndarray  # (n, 3) lam * z.A, rad/us
    lam: float
    larmor: float  # nuclear Larmor frequency, rad/us
    gamma_n: float = GAMMA_C13
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.positions)

    def summary(self) -> dict:
        return {"seed": self.seed, "abundance": self.abundance, "cutoff_nm": self.cutoff, "n_spins": len(self)}

    def to_json(self, path) -> None:
        doc = {
            "seed": self.seed,
            "abundance": self.abundance,
            "cutoff_nm": self.cutoff,
            "lattice_constant_nm": self.lattice_constant,
            "lam": self.lam,
            "larmor_rad_per_us": self.larmor,
            "gamma_n": self.gamma_n,
            "positions_nm": self.positions.tolist(),
            "hyperfine_rad_per_us": self.hyperfine.tolist(),
            "metadata": self.metadata,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> BathRealization:
        with open(path) as fh:
            doc = json.load(fh)
        return cls(
            seed=doc["seed"],
            abundance=doc["abundance"],
            cutoff=doc["cutoff_nm"],
            lattice_constant=doc["lattice_constant_nm"],
            positions=np.array(doc["positions_nm"], dtype=float).reshape(-1, 3),
            hyperfine=np.array(doc["hyperfine_rad_per_us"], dtype=float).reshape(-1, 3),
            lam=doc["lam"],
            larmor=doc["larmor_rad_per_us"],
            gamma_n=doc["gamma_n"],
            metadata=doc.get("metadata", {}),
        )


def hyperfine_vectors(local: np.ndarray, gamma_s: float, gamma_n: float) -> np.ndarray:
    """z.A for nuclei at sensor-frame displacements ``local`` (n, 3)."""
    r = np.linalg.norm(local, axis=1)
    n = local / r[:, None]
    c = dipolar_prefactor(gamma_s, gamma_n) / r**3
    z = np.array([0.0, 0.0, 1.0])
    return c[:, None] * (z[None, :] - 3.0 * n[:, 2:3] * n)


def generate_bath(
    seed: int,
    abundance: float = NATURAL_ABUNDANCE,
    cutoff: float = 8.0,
    sensor: SensorConfig | None = None,
    field: FieldConfig | None = None,
    lattice_constant: float = LATTICE_CONSTANT,
) -> BathRealization:
    """Occupy each carbon site within ``cutoff`` independently with probability ``abundance``."""
    if not 0.0 <= abundance <= 1.0:
        raise ValueError("abundance must lie in [0, 1]")
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    sensor = sensor or SensorConfig("bath-sensor")
    field = field or FieldConfig(0.0)
    sites = diamond_sites(cutoff, lattice_constant)
    rng = np.random.default_rng(seed)
    occupied = sites[rng.random(len(sites)) < abundance]
    # lattice is in the crystal (lab) frame; couplings need the sensor frame
    local = occupied @ sensor.frame().T
    lam = nv_eigensystem(sensor, field).lam if (sensor.strain or field.magnitude) else 1.0
    hf = lam * hyperfine_vectors(local, sensor.gamma, GAMMA_C13) if len(local) else np.zeros((0, 3))
    larmor = -GAMMA_C13 * float(field.vector(sensor)[2])
    return BathRealization(
        seed=int(seed),
        abundance=float(abundance),
        cutoff=float(cutoff),
        lattice_constant=float(lattice_constant),
        positions=local,
        hyperfine=hf,
        lam=float(lam),
        larmor=larmor,
        metadata={"n_sites": int(len(sites))},
    )


@dataclass(frozen=True)
class PairSet:
    """Bath pairs with pseudospin parameters: flip-flop ``b`` and detuning ``delta``."""

    index: np.ndarray  # (m, 2) spin indices, lexicographically sorted
    b: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def _pair_params(bath: BathRealization, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = bath.positions[idx[:, 1]] - bath.positions[idx[:, 0]]
    r = np.linalg.norm(d, axis=1)
    cos = d[:, 2] / r
    d_zz = dipolar_prefactor(bath.gamma_n, bath.gamma_n) / r**3 * (1 - 3 * cos**2)
    a = bath.hyperfine[:, 2]
    return -d_zz / 4, (a[idx[:, 0]] - a[idx[:, 1]]) / 2


def enumerate_pairs(bath: BathRealization, floor: float = COUPLING_FLOOR, nearest_only: bool = False) -> PairSet:
    """Pairs with |D_zz| > floor and hyperfine difference > floor.

    ``nearest_only`` keeps only each spin's pair with its nearest neighbour.
    """
    if len(bath) < 2:
        return PairSet(np.zeros((0, 2), dtype=int), np.zeros(0), np.zeros(0))
    tree = cKDTree(bath.positions)
    if nearest_only:
        _, nn = tree.query(bath.positions, k=2)
        idx = np.sort(np.stack([np.arange(len(bath)), nn[:, 1]], axis=1), axis=1)
        idx = np.unique(idx, axis=0)
    elif floor <= 0:
        idx = np.stack(np.triu_indices(len(bath), k=1), axis=1)
    else:
        # |D_zz| <= 2 |C| / r^3 bounds the search radius
        r_max = (2 * abs(dipolar_prefactor(bath.gamma_n, bath.gamma_n)) / floor) ** (1 / 3)
        idx = tree.query_pairs(r_max, output_type="ndarray")
        idx = idx[np.lexsort((idx[:, 1], idx[:, 0]))] if len(idx) else np.zeros((0, 2), dtype=int)
    b, delta = _pair_params(bath, idx)
    keep = (4 * np.abs(b) > floor) & (2 * np.abs(delta) > floor)
    return PairSet(idx[keep], b[keep], delta[keep])


def pair_cluster_coherence(b, delta, n: int, times):
    """Coherence of a nuclear pair under CPMG-n, maximally mixed initial state.

    Only the {|ud>, |du>} block evolves nontrivially, so
    ``L = 1/2 + (1/2) L_pseudo``.  Broadcasts over ``b``/``delta`` and ``times``.
    """
    b = np.asarray(b, dtype=float)
    delta = np.asarray(delta, dtype=float)
    zeros = np.zeros_like(b + delta)
    v_plus = np.stack([2 * b + zeros, zeros, 2 * delta + zeros], axis=-1)
    v_zero = np.stack([2 * b + zeros, zeros, zeros], axis=-1)
    return 0.5 + 0.5 * su2_decay(v_plus, v_zero, n, times)


def _single_spin_coherence(a, n, times):
    zeros = np.zeros_like(a)
    return su2_decay(np.stack([zeros, zeros, a], axis=-1), np.zeros(a.shape + (3,)), n, times)


def _chunk_product(pairs: PairSet, single: np.ndarray, lo: int, hi: int, n: int, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)[None, :]
    raw = pair_cluster_coherence(pairs.b[lo:hi, None], pairs.delta[lo:hi, None], n, t)
    idx = pairs.index[lo:hi]
    sub = single[idx[:, 0]] * single[idx[:, 1]]
    bad = np.abs(sub) < 1e-12
    if np.any(bad):
        warnings.warn("vanishing sub-cluster coherence; using raw pair value", stacklevel=3)
    corr = np.where(bad, raw, raw / np.where(bad, 1.0, sub))
    return np.prod(corr, axis=0)


def cce2_decay(bath: BathRealization, n: int, times, pairs: PairSet | None = None, threads: int = 1) -> np.ndarray:
    """L_bath(t) as the product of pair correlations (single-spin factors are 1 under DD)."""
    times = np.asarray(times, dtype=float)
    pairs = enumerate_pairs(bath) if pairs is None else pairs
    out = np.ones_like(times)
    if len(pairs) == 0:
        return out
    single = _single_spin_coherence(bath.hyperfine[:, 2][:, None], n, times[None, :])
    bounds = [(lo, min(lo + CHUNK, len(pairs))) for lo in range(0, len(pairs), CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda b: _chunk_product(pairs, single, b[0], b[1], n, times), bounds))
    else:
        parts = [_chunk_product(pairs, single, lo, hi, n, times) for lo, hi in bounds]
    for p in parts:  # fixed reduction order
        out = out * p
    return out


def cce2_coherence(bath: BathRealization, n: int, times, threads: int = 1, convergence: bool = True) -> CoherenceCurve:
    times = np.asarray(times, dtype=float)
    pairs = enumerate_pairs(bath)
    values = cce2_decay(bath, n, times, pairs, threads)
    meta = {"n_pulses": n, "n_spins": len(bath), "n_pairs": len(pairs), "seed": bath.seed}
    if convergence:
        nn = cce2_decay(bath, n, times, enumerate_pairs(bath, nearest_only=True), threads)
        meta["nearest_neighbour_deviation"] = float(np.max(np.abs(values - nn))) if len(times) else 0.0
    return CoherenceCurve(times, values, "cce2", bath.summary(), meta)


def pair_dephasing_model(bath: BathRealization, i: int, j: int) -> DephasingModel:
    """Full 4x4 secular model of spins ``i`` and ``j`` (reference for the pseudospin reduction)."""
    sx, sy, sz = spin_operators(0.5)
    dims = (2, 2)
    d = bath.positions[j] - bath.positions[i]
    r = np.linalg.norm(d)
    d_zz = dipolar_prefactor(bath.gamma_n, bath.gamma_n) / r**3 * (1 - 3 * (d[2] / r) ** 2)
    ops = [[embed(o, k, dims) for o in (sx, sy, sz)] for k in range(2)]
    h_zero = bath.larmor * (ops[0][2] + ops[1][2])
    h_zero = h_zero + d_zz * (ops[0][2] @ ops[1][2] - 0.5 * (ops[0][0] @ ops[1][0] + ops[0][1] @ ops[1][1]))
    a = bath.hyperfine[:, 2]
    beta = a[i] * ops[0][2] + a[j] * ops[1][2]
    return DephasingModel(
        h_plus=h_zero + beta, h_zero=h_zero, beta=beta, h_free=h_zero + beta / 2, splitting=0.0, lam=bath.lam
    )
