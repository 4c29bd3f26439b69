"""Command-line entry point: ``nvlocate {simulate,library,locate,bath}``.

Exit codes: 0 success, 2 configuration error, 3 guard refusal (existing
output without --force, hash mismatch), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bath import cce2_coherence, generate_bath
from .coherence import CoherenceCurve, Scenario, coherence_curve
from .config import ConfigError, RunConfig, load_config
from .positioning import (
    FingerprintLibrary,
    build_library,
    control_params,
    extract_features,
    intersect_sensors,
    match_features,
    physics_hash,
    remove_bystanders,
)

EXIT_OK, EXIT_CONFIG, EXIT_GUARD, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("nvlocate")


class GuardError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


def _out(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path("out") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise GuardError(f"{path} exists; pass --force to overwrite")


def _finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _control_hash(cfg: RunConfig, sensor) -> str:
    return physics_hash(control_params(sensor, cfg.field, cfg.sequence.effective_pulses))


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = _out(args, cfg)
    times = cfg.sequence.times()
    written = []
    for s in cfg.sensors:
        path = out / f"curve_{s.id}.csv"
        _guard(path, args.force)
        others = tuple(o for o in cfg.sensors if o is not s) if cfg.include_bystanders else ()
        sc = Scenario(s, cfg.field, cfg.target, others, None, cfg.quadratic_term)
        curve = coherence_curve(sc, cfg.sequence.n_pulses, times, cfg.engine, cfg.sequence.family)
        _finite(curve.values, f"curve for sensor {s.id}")
        curve.metadata.update(
            config_hash=cfg.hash, control_hash=_control_hash(cfg, s), sensor=s.id, version=__version__
        )
        curve.to_csv(path)
        written.append(str(path))
        feat = extract_features(curve, threshold=cfg.match.threshold)
        msg = f"{s.id}: first dip t={feat.time:.4f} us depth={feat.depth:.4f}" if feat.found else f"{s.id}: no dip"
        print(msg)
    print(f"wrote {len(written)} curves to {out} (config hash {cfg.hash})")
    return EXIT_OK


def cmd_library(cfg: RunConfig, args) -> int:
    if cfg.grid is None:
        raise ConfigError(f"{cfg.source}: 'library' section required for the library verb")
    out = _out(args, cfg)
    summary = {}
    for s in cfg.sensors:
        path = out / f"library_{s.id}.nvlib"
        _guard(path, args.force)
        start = time.perf_counter()
        lib = build_library(cfg.grid, s, cfg.field, engine=args.engine_lib or cfg.library_engine, threads=args.threads)
        elapsed = time.perf_counter() - start
        _finite(lib.depth, f"library for sensor {s.id}")
        lib.metadata["config_hash"] = cfg.hash
        lib.save(path)
        if args.csv:
            lib.to_csv(out / f"library_{s.id}.csv")
        summary[s.id] = {
            "file": str(path),
            "cells": lib.grid.n_cells,
            "engine": lib.engine,
            "control_hash": lib.control_hash,
            "build_seconds": round(elapsed, 2),
        }
        print(f"{s.id}: {lib.grid.n_cells} cells ({lib.engine}) in {elapsed:.1f} s -> {path}")
    _write_json(out / "library_summary.json", {"config_hash": cfg.hash, "libraries": summary})
    return EXIT_OK


def _hash_diff(curve_meta: dict, lib: FingerprintLibrary, cfg: RunConfig, sensor) -> str:
    want = control_params(sensor, cfg.field, cfg.sequence.effective_pulses)
    lines = [f"  {k}: config/curve={want[k]!r} library={lib.control.get(k)!r}" for k in want if want[k] != lib.control.get(k)]
    lines.append(f"  curve control hash {curve_meta.get('control_hash')} vs library {lib.control_hash}")
    return "\n".join(lines)


def cmd_locate(cfg: RunConfig, args) -> int:
    out = _out(args, cfg)
    curve_dir = Path(args.curves) if args.curves else out
    lib_dir = Path(args.libraries) if args.libraries else out
    path = out / "estimate.json"
    _guard(path, args.force)
    curves, libs = [], []
    for s in cfg.sensors:
        cpath, lpath = curve_dir / f"curve_{s.id}.csv", lib_dir / f"library_{s.id}.nvlib"
        for p in (cpath, lpath):
            if not p.exists():
                raise ConfigError(f"{p}: missing input for sensor {s.id}")
        curve = CoherenceCurve.from_csv(cpath)
        lib = FingerprintLibrary.load(lpath)
        expected = _control_hash(cfg, s)
        if lib.control_hash != expected or curve.metadata.get("control_hash", expected) != lib.control_hash:
            raise GuardError(f"control mismatch for sensor {s.id}:\n" + _hash_diff(curve.metadata, lib, cfg, s))
        if cfg.match.remove_bystanders and len(cfg.sensors) > 1:
            curve = remove_bystanders(curve, s, [o for o in cfg.sensors if o is not s], cfg.field, cfg.sequence.effective_pulses)
        curves.append(curve)
        libs.append(lib)
    m = cfg.match
    feats = [extract_features(c, threshold=m.threshold) for c in curves]
    matches = [match_features(f, lib, m.tol_t, m.tol_depth) for f, lib in zip(feats, libs)]
    est = intersect_sensors(cfg.sensors, matches, m.voxel_nm)
    doc = est.to_dict()
    doc["config_hash"] = cfg.hash
    doc["matches"] = {s.id: mr.to_dict() for s, mr in zip(cfg.sensors, matches)}
    if cfg.target is not None:
        inside = est.contains(cfg.target.position)
        doc["expected_position_nm"] = list(cfg.target.position)
        doc["expected_position_contained"] = inside
        doc["flags"]["displaced_from_expected"] = not inside
    _write_json(path, doc)
    for s, mr in zip(cfg.sensors, matches):
        boxes = "; ".join(
            f"R [{b['r_nm'][0]:.2f}, {b['r_nm'][1]:.2f}] nm, theta [{b['theta_deg'][0]:.1f}, {b['theta_deg'][1]:.1f}] deg"
            for b in (x.to_dict() for x in mr.boxes)
        )
        print(f"{s.id}: {boxes or 'no match ' + json.dumps(mr.diagnostic)}")
    print(est.summary())
    if cfg.target is not None and not doc["expected_position_contained"]:
        print("flag: estimate does not contain the configured target position")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bath(cfg: RunConfig, args) -> int:
    if cfg.bath is None:
        raise ConfigError(f"{cfg.source}: 'bath' section required for the bath verb")
    out = _out(args, cfg)
    spec = cfg.bath
    sensor = cfg.sensor(spec.sensor) if spec.sensor else cfg.sensors[0]
    times = spec.times()
    path = out / "bath_curve.csv"
    _guard(path, args.force)
    values = []
    realizations = []
    for k in range(spec.n_realizations):
        seed = cfg.seed + k
        bath = generate_bath(seed, spec.abundance, spec.cutoff_nm, sensor, cfg.field)
        curve = cce2_coherence(bath, cfg.sequence.effective_pulses, times, threads=args.threads)
        _finite(curve.values, f"bath realization {seed}")
        rpath = out / f"bath_realization_{seed}.json"
        bath.metadata["config_hash"] = cfg.hash
        bath.to_json(rpath)
        values.append(curve.values)
        realizations.append({"seed": seed, "file": rpath.name, **curve.metadata})
        print(f"seed {seed}: {len(bath)} spins, {curve.metadata['n_pairs']} pairs, min L {curve.values.min():.6f}")
    mean = np.mean(values, axis=0)
    meta = {
        "config_hash": cfg.hash,
        "sensor": sensor.id,
        "n_pulses": cfg.sequence.effective_pulses,
        "bath": dataclasses.asdict(spec),
        "realizations": realizations,
        "version": __version__,
    }
    CoherenceCurve(times, mean, "cce2", {"sensor": sensor.id}, meta).to_csv(path)
    print(f"seed-averaged L_bath: min {mean.min():.6f} over [0, {spec.t_stop_us}] us -> {path}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "library": cmd_library, "locate": cmd_locate, "bath": cmd_bath}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvlocate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (default out/<config name>)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for library and bath")
    p.add_argument("--engine", choices=["magnus", "exact", "semiclassical"], help="override the coherence engine")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--csv", action="store_true", help="also export libraries as CSV")
    p.add_argument("--curves", help="locate: directory with curve_<id>.csv (default --out)")
    p.add_argument("--libraries", help="locate: directory with library_<id>.nvlib (default --out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        args.engine_lib = None
        if args.engine is not None:
            cfg.engine = args.engine
            if args.engine in ("exact", "magnus"):
                args.engine_lib = args.engine
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GuardError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
