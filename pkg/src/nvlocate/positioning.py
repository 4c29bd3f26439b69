"""Fingerprint library, dip features, matching and three-sensor intersection.

Pipeline: every sensor's coherence curve yields one ``DipFeature`` (time
and depth of the first dip).  Matching the feature against a library of
precomputed features over (R, theta) gives a set of boxes in that plane.
Each box is a thick cone shell around the sensor; the target must lie in
one shell of every sensor, which a voxel scan resolves.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import __version__
from .coherence import CoherenceCurve, Scenario, coherence_values, dip_time, magnus_decay, su2_decay
from .nv import FieldConfig, SensorConfig, nv_eigensystem
from .spin import GAMMA_E, dipolar_components

LIBRARY_ENGINES = ("exact", "magnus")
MAGIC = b"NVFPLIB1"
CELL_CHUNK = 4096
COARSE = 21  # samples across the main lobe, |t / t_dip - 1| <= 2 / N
FINE = 9
SUBSAMPLE = 4  # per-axis sub-samples of a kept voxel when measuring region extent


def physics_hash(params: dict) -> str:
    """Short sha256 of canonical JSON; equal hashes mean equal physics inputs."""
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def control_params(sensor: SensorConfig, field: FieldConfig, n_pulses: int, gamma_target: float = GAMMA_E) -> dict:
    """Everything besides the target position that fixes a sensor's dip features."""
    return {
        "n_pulses": int(n_pulses),
        "field_gauss": float(field.magnitude),
        "field_direction": None if field.direction is None else [float(x) for x in field.direction],
        "strain": float(sensor.strain),
        "gamma_sensor": float(sensor.gamma),
        "gamma_target": float(gamma_target),
        "zfs": float(sensor.zfs),
    }


# --------------------------------------------------------------------------- features


@dataclass(frozen=True)
class DipFeature:
    time: float  # us; nan when no dip
    depth: float
    found: bool = True

    @classmethod
    def none(cls) -> DipFeature:
        return cls(float("nan"), 1.0, False)


def _parabola_vertex(t, v):
    """Vertex of the parabola through three points (rows of ``t``/``v``)."""
    t0, t1, t2 = t[..., 0], t[..., 1], t[..., 2]
    v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
    d01 = (v1 - v0) / (t1 - t0)
    d12 = (v2 - v1) / (t2 - t1)
    a = (d12 - d01) / (t2 - t0)
    ok = a > 0
    a_safe = np.where(ok, a, 1.0)
    tv = np.where(ok, (t0 + t1) / 2 - d01 / (2 * a_safe), t1)
    tv = np.clip(tv, t0, t2)
    # Newton form of the interpolating parabola
    vv = np.where(ok, v0 + d01 * (tv - t0) + a * (tv - t0) * (tv - t1), v1)
    return tv, vv


def _first_dip_index(values: np.ndarray, threshold: float, tie_tol: float) -> np.ndarray:
    """Row-wise index of the first dip, or -1.

    Candidates are interior local minima below ``threshold``; the first dip
    is the earliest candidate within ``tie_tol`` of the deepest candidate,
    which skips filter side lobes ahead of the main dip.
    """
    v = np.atleast_2d(values)
    inner = v[:, 1:-1]
    cand = (inner <= v[:, :-2]) & (inner < v[:, 2:]) & (inner < threshold)
    masked = np.where(cand, inner, np.inf)
    best = masked.min(axis=1)
    ok = np.isfinite(best)
    near = cand & (inner <= best[:, None] + tie_tol)
    idx = np.argmax(near, axis=1) + 1
    return np.where(ok, idx, -1)


def extract_features(curve: CoherenceCurve, threshold: float = 0.99, tie_tol: float = 0.02, window=None) -> DipFeature:
    """First dip of ``curve``; ``window=(t_lo, t_hi)`` restricts the search."""
    t, v = curve.times, curve.values
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, v = t[keep], v[keep]
    if len(t) < 3:
        return DipFeature.none()
    i = int(_first_dip_index(v, threshold, tie_tol)[0])
    if i < 0:
        return DipFeature.none()
    tv, vv = _parabola_vertex(t[i - 1 : i + 2], v[i - 1 : i + 2])
    return DipFeature(float(tv), float(vv))


# --------------------------------------------------------------------------- library


@dataclass(frozen=True)
class LibraryGrid:
    """(R, theta) grid plus the control it was computed for.  Angles in degrees here."""

    r_min: float = 5.0
    r_max: float = 30.0
    dr: float = 0.02
    theta_min_deg: float = 0.0
    theta_max_deg: float = 90.0
    dtheta_deg: float = 0.2
    n_pulses: int = 30

    def __post_init__(self):
        if self.dr <= 0 or self.dtheta_deg <= 0:
            raise ValueError("grid steps must be positive")
        if self.r_max < self.r_min or self.theta_max_deg < self.theta_min_deg:
            raise ValueError("grid range is empty")
        if self.r_min <= 0:
            raise ValueError("R_min must be positive")
        if self.n_pulses < 1:
            raise ValueError("need at least one pulse")

    @property
    def r_values(self) -> np.ndarray:
        n = int(round((self.r_max - self.r_min) / self.dr)) + 1
        return self.r_min + self.dr * np.arange(n)

    @property
    def theta_values(self) -> np.ndarray:
        """Radians."""
        n = int(round((self.theta_max_deg - self.theta_min_deg) / self.dtheta_deg)) + 1
        return np.radians(self.theta_min_deg + self.dtheta_deg * np.arange(n))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.r_values), len(self.theta_values)

    @property
    def n_cells(self) -> int:
        a, b = self.shape
        return a * b


@dataclass
class FingerprintLibrary:
    grid: LibraryGrid
    dip_time: np.ndarray  # (nR, ntheta) us
    depth: np.ndarray  # (nR, ntheta); 1.0 marks "no dip"
    engine: str
    control: dict
    metadata: dict = field(default_factory=dict)

    @property
    def control_hash(self) -> str:
        return physics_hash(self.control)

    @property
    def has_dip(self) -> np.ndarray:
        return self.depth < 1.0

    def header(self) -> dict:
        return {
            "format": "nvlocate fingerprint library",
            "grid": asdict(self.grid),
            "shape": list(self.grid.shape),
            "engine": self.engine,
            "control": self.control,
            "control_hash": self.control_hash,
            "columns": ["t_dip_us", "depth"],
            "dtype": "<f8",
            "order": "row-major (R, theta, column)",
            "metadata": self.metadata,
        }

    def save(self, path) -> None:
        """MAGIC, uint64 header length, JSON header, then float64 cells (R, theta, 2)."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        cells = np.stack([self.dip_time, self.depth], axis=-1).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(cells.tobytes(order="C"))

    @classmethod
    def load(cls, path) -> FingerprintLibrary:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise ValueError(f"{path}: not a fingerprint library file")
            (n,) = struct.unpack("<Q", fh.read(8))
            head = json.loads(fh.read(n))
            cells = np.frombuffer(fh.read(), dtype="<f8")
        shape = tuple(head["shape"])
        if cells.size != shape[0] * shape[1] * 2:
            raise ValueError(f"{path}: truncated cell payload")
        cells = cells.reshape(shape + (2,))
        return cls(
            LibraryGrid(**head["grid"]),
            cells[..., 0].copy(),
            cells[..., 1].copy(),
            head["engine"],
            head["control"],
            head.get("metadata", {}),
        )

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r_nm", "theta_deg", "t_dip_us", "depth"])
        th = np.degrees(self.grid.theta_values)
        for i, r in enumerate(self.grid.r_values):
            for j, a in enumerate(th):
                w.writerow([f"{r:.6g}", f"{a:.6g}", repr(float(self.dip_time[i, j])), repr(float(self.depth[i, j]))])
        if path_or_buf is None:
            return buf.getvalue()
        with open(path_or_buf, "w") as fh:
            fh.write(buf.getvalue())
        return None


def _cell_values(engine, a_z, a_perp, lam, omega_e, n, times):
    """Coherence for cells (rows) at ``times`` (cells x samples)."""
    if engine == "magnus":
        return magnus_decay(a_z[:, None], a_perp[:, None], lam, omega_e, n, times)
    zeros = np.zeros_like(a_z)
    free = np.stack([zeros, zeros, zeros + omega_e], axis=-1)[:, None, :]
    plus = free + lam * np.stack([a_perp, zeros, a_z], axis=-1)[:, None, :]
    return su2_decay(plus, free, n, times)


def cell_features(a_z, a_perp, lam, omega_e, n, engine="exact", threshold=0.99, tie_tol=0.02):
    """Refined first-dip (time, depth) for arrays of couplings.

    The main lobe around the q=1 prediction is sampled coarsely, the chosen
    minimum resampled finely, and the vertex of a parabola taken.
    """
    a_z = np.asarray(a_z, dtype=float).ravel()
    a_perp = np.asarray(a_perp, dtype=float).ravel()
    t_out = np.full(a_z.shape, np.nan)
    d_out = np.ones(a_z.shape)
    w = omega_e + lam * a_z / 2
    live = (a_perp * abs(lam) > 1e-12 * abs(omega_e)) & (w > 0)
    t_pred = np.full(a_z.shape, np.nan)
    t_pred[w > 0] = dip_time(n, 1, omega_e, lam, a_z[w > 0])
    t_out[:] = t_pred
    if not np.any(live):
        return t_out, d_out
    idx = np.flatnonzero(live)
    tp = t_pred[idx]
    span = 2.0 / n
    u = np.linspace(-span, span, COARSE)
    times = tp[:, None] * (1 + u[None, :])
    vals = _cell_values(engine, a_z[idx], a_perp[idx], lam, omega_e, n, times)
    k = _first_dip_index(vals, threshold, tie_tol)
    has = k >= 0
    k = np.where(has, k, COARSE // 2)
    step = u[1] - u[0]
    fine_u = u[k][:, None] + np.linspace(-step, step, FINE)[None, :]
    ft = tp[:, None] * (1 + fine_u)
    fv = _cell_values(engine, a_z[idx], a_perp[idx], lam, omega_e, n, ft)
    j = np.clip(np.argmin(fv, axis=1), 1, FINE - 2)
    rows = np.arange(len(idx))[:, None]
    sel = j[:, None] + np.array([-1, 0, 1])[None, :]
    tv, vv = _parabola_vertex(ft[rows, sel], fv[rows, sel])
    t_out[idx[has]] = tv[has]
    d_out[idx[has]] = np.minimum(vv[has], 1.0)
    return t_out, d_out


def build_library(
    grid: LibraryGrid,
    sensor: SensorConfig,
    field: FieldConfig,
    engine: str = "exact",
    threads: int = 1,
    gamma_target: float = GAMMA_E,
) -> FingerprintLibrary:
    """Features for every (R, theta) cell; cells without transverse coupling get depth 1."""
    if engine not in LIBRARY_ENGINES:
        raise ValueError(f"library engine must be one of {LIBRARY_ENGINES}")
    if field.direction is not None:
        raise ValueError("library assumes the field along the sensor axis")
    lam = nv_eigensystem(sensor, field).lam
    omega_e = -gamma_target * field.magnitude
    rr, tt = np.meshgrid(grid.r_values, grid.theta_values, indexing="ij")
    a_z, a_perp = dipolar_components(rr.ravel(), tt.ravel(), sensor.gamma, gamma_target)
    bounds = [(lo, min(lo + CELL_CHUNK, a_z.size)) for lo in range(0, a_z.size, CELL_CHUNK)]

    def work(b):
        lo, hi = b
        return cell_features(a_z[lo:hi], a_perp[lo:hi], lam, omega_e, grid.n_pulses, engine)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    t_dip = np.concatenate([p[0] for p in parts]).reshape(grid.shape)
    depth = np.concatenate([p[1] for p in parts]).reshape(grid.shape)
    control = control_params(sensor, field, grid.n_pulses, gamma_target)
    meta = {
        "version": __version__,
        "sensor": sensor.id,
        "lam": lam,
        "n_cells": grid.n_cells,
    }
    return FingerprintLibrary(grid, t_dip, depth, engine, control, meta)


# --------------------------------------------------------------------------- matching


@dataclass(frozen=True)
class Box:
    """Axis-aligned cell-centre range; theta in radians."""

    r_lo: float
    r_hi: float
    theta_lo: float
    theta_hi: float

    def to_dict(self) -> dict:
        return {
            "r_nm": [self.r_lo, self.r_hi],
            "theta_deg": [float(np.degrees(self.theta_lo)), float(np.degrees(self.theta_hi))],
        }


@dataclass
class MatchResult:
    boxes: list[Box]
    mask: np.ndarray  # matched cells
    grid: LibraryGrid
    tol_t: float
    tol_depth: float
    feature: DipFeature
    diagnostic: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.boxes

    def contains(self, r: float, theta: float) -> bool:
        """True if (r, theta) lies in a matched box (padded by half a grid step)."""
        hr = self.grid.dr / 2
        ht = np.radians(self.grid.dtheta_deg) / 2
        return any(
            b.r_lo - hr <= r <= b.r_hi + hr and b.theta_lo - ht <= theta <= b.theta_hi + ht for b in self.boxes
        )

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "n_cells": int(self.mask.sum()),
            "tol_t": self.tol_t,
            "tol_depth": self.tol_depth,
            "feature": {"time_us": self.feature.time, "depth": self.feature.depth, "found": self.feature.found},
            "diagnostic": self.diagnostic,
        }


def match_features(
    feature: DipFeature, lib: FingerprintLibrary, tol_t: float = 0.001, tol_depth: float = 0.02
) -> MatchResult:
    """Cells with |t - t_f| <= tol_t t_f and |depth - d_f| <= tol_depth, merged into boxes."""
    if tol_t < 0 or tol_depth < 0:
        raise ValueError("tolerances must be non-negative")
    r, th = lib.grid.r_values, lib.grid.theta_values
    if not feature.found:
        mask = np.zeros(lib.grid.shape, dtype=bool)
        return MatchResult([], mask, lib.grid, tol_t, tol_depth, feature, {"reason": "no dip in curve"})
    dt = np.abs(lib.dip_time - feature.time) / feature.time
    dd = np.abs(lib.depth - feature.depth)
    # tiny slack so that a zero tolerance still admits the cell the feature came from
    mask = lib.has_dip & (dt <= tol_t + 1e-12) & (dd <= tol_depth + 1e-12)
    boxes = []
    diag: dict = {}
    if mask.any():
        labels, _ = ndimage.label(mask, structure=np.ones((3, 3)))
        for sl in ndimage.find_objects(labels):
            boxes.append(Box(float(r[sl[0].start]), float(r[sl[0].stop - 1]), float(th[sl[1].start]), float(th[sl[1].stop - 1])))
    else:
        score = np.where(lib.has_dip, dt / max(tol_t, 1e-12) + dd / max(tol_depth, 1e-12), np.inf)
        i, j = np.unravel_index(np.argmin(score), score.shape)
        diag = {
            "reason": "no library cell within tolerance",
            "nearest_cell": {"r_nm": float(r[i]), "theta_deg": float(np.degrees(th[j]))},
            "relative_time_error": float(dt[i, j]),
            "depth_error": float(dd[i, j]),
        }
    return MatchResult(boxes, mask, lib.grid, tol_t, tol_depth, feature, diag)


# --------------------------------------------------------------------------- intersection


@dataclass
class Region:
    voxels: np.ndarray  # (m, 3) voxel centres, nm, lab frame; cubes touching the consistent set
    centroid: np.ndarray  # of the consistent sub-samples
    bbox: tuple[np.ndarray, np.ndarray]  # extent of the consistent sub-samples
    resolution: float
    mirror: tuple[bool, ...]  # per sensor: consistent only through the pi - theta branch

    def contains(self, point, voxel: float) -> bool:
        """True if ``point`` falls in one of the region's voxels."""
        p = np.asarray(point, dtype=float)
        return bool(np.min(np.max(np.abs(self.voxels - p), axis=1)) <= voxel / 2 + 1e-9)

    def to_dict(self) -> dict:
        return {
            "centroid_nm": self.centroid.tolist(),
            "bbox_nm": [self.bbox[0].tolist(), self.bbox[1].tolist()],
            "resolution_nm": self.resolution,
            "n_voxels": int(len(self.voxels)),
            "mirror_branch": list(self.mirror),
        }


@dataclass
class PositionEstimate:
    regions: list[Region]
    voxel: float
    flags: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.regions

    @property
    def primary(self) -> Region | None:
        """Largest region reached through the direct theta branch of every sensor."""
        direct = [r for r in self.regions if not any(r.mirror)]
        return direct[0] if direct else (self.regions[0] if self.regions else None)

    @property
    def resolution(self) -> float:
        """Extent of the primary region (nan when empty)."""
        return float("nan") if self.primary is None else self.primary.resolution

    def contains(self, point) -> bool:
        return any(r.contains(point, self.voxel) for r in self.regions)

    def to_dict(self) -> dict:
        return {
            "regions": [r.to_dict() for r in self.regions],
            "voxel_nm": self.voxel,
            "resolution_nm": None if self.empty else self.resolution,
            "primary_region": None if self.empty else self.regions.index(self.primary),
            "flags": self.flags,
            "diagnostics": self.diagnostics,
        }

    def summary(self) -> str:
        if self.empty:
            return "no consistent position"
        lines = []
        for k, r in enumerate(self.regions):
            c = ", ".join(f"{x:.3f}" for x in r.centroid)
            tag = " [mirror branch]" if any(r.mirror) else ""
            lines.append(f"region {k}: centroid ({c}) nm, resolution {r.resolution:.3f} nm, {len(r.voxels)} voxels{tag}")
        if self.flags.get("ambiguous"):
            lines.append("ambiguous: more than one candidate region")
        return "\n".join(lines)


def _consistent(points, sensors, matches, pad):
    """Mask of points lying in every sensor's boxes; also per-sensor 'direct branch' masks."""
    ok = np.ones(len(points), dtype=bool)
    direct = []
    for s, m in zip(sensors, matches):
        local = (points - s.pos) @ s.frame().T
        r = np.linalg.norm(local, axis=1)
        th = np.arccos(np.clip(local[:, 2] / np.where(r > 0, r, 1.0), -1, 1))
        hr = m.grid.dr / 2 + pad
        ht = np.radians(m.grid.dtheta_deg) / 2 + pad / np.maximum(r, 1e-9)
        hit_a = np.zeros(len(points), dtype=bool)
        hit_b = np.zeros(len(points), dtype=bool)
        for b in m.boxes:
            in_r = (r >= b.r_lo - hr) & (r <= b.r_hi + hr)
            hit_a |= in_r & (th >= b.theta_lo - ht) & (th <= b.theta_hi + ht)
            mt = np.pi - th
            hit_b |= in_r & (mt >= b.theta_lo - ht) & (mt <= b.theta_hi + ht)
        ok &= hit_a | hit_b
        direct.append(hit_a)
    return ok, direct


def _box_grid(lo, hi, h):
    n = np.maximum(np.ceil((hi - lo) / h).astype(int), 1)
    axes = [lo[k] + h * (np.arange(n[k]) + 0.5) for k in range(3)]
    return axes


def intersect_sensors(
    sensors, matches, voxel: float = 0.05, coarse: float = 0.4, max_voxels: int = 20_000_000
) -> PositionEstimate:
    """Voxels consistent with every sensor's (R, theta) boxes, grouped into connected regions."""
    if len(sensors) != len(matches):
        raise ValueError("one match result per sensor required")
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pos = np.array([s.pos for s in sensors])
    flags = {"degenerate": False, "ambiguous": False}
    if len(sensors) < 3 or np.linalg.matrix_rank(pos[1:] - pos[0], tol=1e-6) < 1:
        flags["degenerate"] = True
        flags["ambiguous"] = True
    empty = {s.id: m.diagnostic for s, m in zip(sensors, matches) if m.empty}
    if empty:
        return PositionEstimate([], voxel, flags, {"empty_matches": empty})

    r_max = np.array([max(b.r_hi for b in m.boxes) + m.grid.dr for m in matches])
    lo = np.max(pos - r_max[:, None], axis=0)
    hi = np.min(pos + r_max[:, None], axis=0)
    if np.any(hi <= lo):
        return PositionEstimate([], voxel, flags, {"reason": "sensor shells do not overlap"})

    # coarse pass: keep coarse cells whose centre is consistent with a padding of a half-diagonal
    h = max(coarse, voxel)
    ax = _box_grid(lo, hi, h)
    cc = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    keep, _ = _consistent(cc, sensors, matches, pad=h * np.sqrt(3) / 2)
    cc = cc[keep]
    if len(cc) == 0:
        return PositionEstimate([], voxel, flags, {"reason": "no consistent voxel"})

    # fine pass on a common lattice anchored at ``lo``
    sub = int(np.ceil(h / voxel))
    offs = voxel * (np.arange(sub) + 0.5) - h / 2
    o = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    if len(cc) * len(o) > max_voxels:
        raise ValueError("intersection scan too large; widen tolerances less or enlarge the voxel")
    pts = (cc[:, None, :] + o[None, :, :]).reshape(-1, 3)
    idx = np.unique(np.round((pts - lo) / voxel - 0.5).astype(np.int64), axis=0)
    pts = lo + voxel * (idx + 0.5)
    # a voxel is kept when its cube reaches the consistent set (padding by the
    # half-diagonal), so a consistent point is never lost between voxel centres
    keep, direct = _consistent(pts, sensors, matches, pad=voxel * np.sqrt(3) / 2)
    idx, pts = idx[keep], pts[keep]
    direct = [d[keep] for d in direct]
    if len(pts) == 0:
        return PositionEstimate([], voxel, flags, {"reason": "no consistent voxel"})

    base = idx.min(axis=0)
    shape = idx.max(axis=0) - base + 1
    occ = np.zeros(shape, dtype=bool)
    occ[tuple((idx - base).T)] = True
    labels, n_reg = ndimage.label(occ, structure=np.ones((3, 3, 3)))
    lab = labels[tuple((idx - base).T)]
    # the extent is measured on sub-samples that pass the unpadded test, so
    # the conservative cover does not inflate the reported resolution
    step = voxel / SUBSAMPLE
    so = step * (np.arange(SUBSAMPLE) + 0.5) - voxel / 2
    so = np.stack(np.meshgrid(so, so, so, indexing="ij"), axis=-1).reshape(-1, 3)
    regions = []
    for k in range(1, n_reg + 1):
        sel = lab == k
        v = pts[sel]
        fine = (v[:, None, :] + so[None, :, :]).reshape(-1, 3)
        inside = np.concatenate([_consistent(c, sensors, matches, 0.0)[0] for c in np.array_split(fine, max(1, len(fine) // 200_000))])
        if inside.any():
            f = fine[inside]
            lo_k, hi_k, centre = f.min(axis=0) - step / 2, f.max(axis=0) + step / 2, f.mean(axis=0)
        else:
            lo_k, hi_k, centre = v.min(axis=0) - voxel / 2, v.max(axis=0) + voxel / 2, v.mean(axis=0)
        mirror = tuple(bool(not d[sel].any()) for d in direct)
        regions.append(Region(v, centre, (lo_k, hi_k), float(np.max(hi_k - lo_k)), mirror))
    regions.sort(key=lambda g: -len(g.voxels))
    flags["ambiguous"] = flags["ambiguous"] or len(regions) > 1
    return PositionEstimate(regions, voxel, flags, {"n_voxels": int(len(pts))})


def bystander_factor(sensor: SensorConfig, others, field: FieldConfig, n: int, times) -> np.ndarray:
    """Coherence factor due to the other sensors alone (known geometry and strains)."""
    sc = Scenario(sensor, field, None, tuple(others))
    return coherence_values(sc, n, times, "exact")


def remove_bystanders(curve: CoherenceCurve, sensor, others, field, n: int, floor: float = 0.05) -> CoherenceCurve:
    """Divide a measured curve by the predicted bystander factor.

    Environment spins are independent, so ``L = L_target * L_bystanders``;
    samples where the factor falls below ``floor`` are dropped.
    """
    f = bystander_factor(sensor, others, field, n, curve.times)
    keep = np.abs(f) > floor
    meta = dict(curve.metadata, bystanders_removed=[o.id for o in others])
    return CoherenceCurve(curve.times[keep], curve.values[keep] / f[keep], curve.engine, curve.scenario, meta)


def locate(
    curves,
    libraries,
    sensors,
    tol_t: float = 0.001,
    tol_depth: float = 0.02,
    voxel: float = 0.05,
    threshold: float = 0.99,
    field: FieldConfig | None = None,
    n_pulses: int | None = None,
):
    """extract_features -> match_features -> intersect_sensors.  Returns (estimate, matches).

    With ``field`` and ``n_pulses`` given, the known inter-sensor contribution
    is divided out of every curve before features are extracted.
    """
    if field is not None and n_pulses is not None:
        curves = [
            remove_bystanders(c, s, [o for o in sensors if o is not s], field, n_pulses) for c, s in zip(curves, sensors)
        ]
    feats = [extract_features(c, threshold=threshold) for c in curves]
    matches = [match_features(f, lib, tol_t, tol_depth) for f, lib in zip(feats, libraries)]
    return intersect_sensors(sensors, matches, voxel), matches


# --------------------------------------------------------------------------- layouts


def triangle_layout(side: float = 6.5, axis=None, center=(0.0, 0.0, 0.0)) -> list[SensorConfig]:
    """Three sensor positions on an equilateral triangle normal to [111] (ids A, B, C)."""
    z = np.ones(3) / np.sqrt(3)
    x = np.cross([0.0, 0.0, 1.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rad = side / np.sqrt(3)
    out = []
    for k, name in enumerate("ABC"):
        phi = 2 * np.pi * k / 3
        p = np.asarray(center) + rad * (np.cos(phi) * x + np.sin(phi) * y)
        out.append(SensorConfig(name, tuple(p), axis=tuple(axis) if axis is not None else tuple(z)))
    return out


def layout_from_truth(target, polar, axes=None, separation: float = 6.5, step_deg: float = 1.0):
    """Sensor positions that see ``target`` at the given (R_i, theta_i).

    The first sensor sits at azimuth 0; the other azimuths are scanned on a
    ``step_deg`` grid and the combination whose largest deviation of a
    pairwise separation from ``separation`` is smallest wins (first on ties).
    ``polar`` holds (R nm, theta rad) per sensor.  Returns (positions, azimuths in degrees).
    """
    target = np.asarray(target, dtype=float)
    axes = axes or [tuple(np.ones(3) / np.sqrt(3))] * len(polar)
    frames = [SensorConfig("tmp", axis=a).frame() for a in axes]
    phis = np.radians(np.arange(0.0, 360.0, step_deg))

    def ring(k):
        r, th = polar[k]
        local = r * np.stack([np.sin(th) * np.cos(phis), np.sin(th) * np.sin(phis), np.full_like(phis, np.cos(th))], axis=-1)
        return target - local @ frames[k]

    rings = [ring(k) for k in range(len(polar))]
    if len(polar) != 3:
        raise ValueError("layout search implemented for three sensors")
    p0 = rings[0][0]
    d01 = np.abs(np.linalg.norm(rings[1] - p0, axis=1) - separation)
    d02 = np.abs(np.linalg.norm(rings[2] - p0, axis=1) - separation)
    d12 = np.abs(np.linalg.norm(rings[1][:, None, :] - rings[2][None, :, :], axis=-1) - separation)
    worst = np.maximum(np.maximum(d01[:, None], d02[None, :]), d12)
    i, j = np.unravel_index(np.argmin(worst), worst.shape)
    pos = [p0, rings[1][i], rings[2][j]]
    az = [0.0, float(np.degrees(phis[i])), float(np.degrees(phis[j]))]
    return [tuple(float(c) for c in p) for p in pos], az
