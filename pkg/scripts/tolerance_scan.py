"""Resolution and truth containment versus matching tolerances.

Uses curves and libraries produced by ``pipeline.py`` (or the CLI) for one
config and re-runs feature matching and intersection on a grid of
(tol_t, tol_depth) values.  Writes ``tolerance_scan.csv``.
"""
import argparse
import warnings
from pathlib import Path

import numpy as np

from nvlocate.coherence import CoherenceCurve
from nvlocate.config import load_config
from nvlocate.positioning import FingerprintLibrary, extract_features, intersect_sensors, match_features, remove_bystanders


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--run-dir", required=True, help="directory with curve_<id>.csv and library_<id>.nvlib")
    p.add_argument("--tol-t", type=float, nargs="+", default=[0.0002, 0.0003, 0.0005, 0.001, 0.002])
    p.add_argument("--tol-depth", type=float, nargs="+", default=[0.005, 0.01, 0.02, 0.05])
    p.add_argument("--voxel-nm", type=float, default=0.05)
    args = p.parse_args()

    cfg = load_config(args.config)
    run = Path(args.run_dir)
    feats, libs = [], []
    for s in cfg.sensors:
        curve = CoherenceCurve.from_csv(run / f"curve_{s.id}.csv")
        others = [o for o in cfg.sensors if o is not s]
        if others:
            curve = remove_bystanders(curve, s, others, cfg.field, cfg.sequence.effective_pulses)
        feats.append(extract_features(curve, threshold=cfg.match.threshold))
        libs.append(FingerprintLibrary.load(run / f"library_{s.id}.nvlib"))
    truth = None if cfg.target is None else np.asarray(cfg.target.position)

    rows = ["tol_t,tol_depth,n_regions,resolution_nm,truth_region_resolution_nm,truth_contained"]
    for tt in args.tol_t:
        for td in args.tol_depth:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ms = [match_features(f, lib, tt, td) for f, lib in zip(feats, libs)]
                est = intersect_sensors(cfg.sensors, ms, args.voxel_nm)
            hit = [r for r in est.regions if truth is not None and r.contains(truth, args.voxel_nm)]
            own = hit[0].resolution if hit else float("nan")
            rows.append(f"{tt},{td},{len(est.regions)},{est.resolution:.4f},{own:.4f},{bool(hit)}")
            print(rows[-1])
    (run / "tolerance_scan.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
