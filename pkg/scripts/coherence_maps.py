"""Single-sensor coherence maps L(t, theta) at fixed R and L(t, R) at fixed theta.

Defaults reproduce the short-range maps (CPMG-30, R = 5 nm, theta = 30 deg);
``--long-range`` gives the CPMG-100 distance map over 10-20 nm.  Writes one
CSV per map: first column the sweep variable, then one column per time.
"""
import argparse
import warnings
from pathlib import Path

import numpy as np

from nvlocate.coherence import Scenario, coherence_values
from nvlocate.nv import FieldConfig, SensorConfig, TargetSpin
from nvlocate.spin import to_angular


def target(r, theta_deg):
    th = np.radians(theta_deg)
    return TargetSpin((r * np.sin(th), 0.0, r * np.cos(th)))


def sweep(sensor, field, n, times, points, engine):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return np.array([coherence_values(Scenario(sensor, field, target(r, th)), n, times, engine) for r, th in points])


def write(path, label, values, times, rows):
    head = ",".join([label] + [f"{t:.6g}" for t in times])
    body = "\n".join(",".join([f"{v:.6g}"] + [f"{x:.9f}" for x in row]) for v, row in zip(values, rows))
    path.write_text(head + "\n" + body + "\n")
    print(f"wrote {path} ({rows.shape[0]} x {rows.shape[1]})")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/maps")
    p.add_argument("--long-range", action="store_true", help="CPMG-100, R in 10-20 nm")
    p.add_argument("--engine", default="exact", choices=["exact", "magnus"])
    p.add_argument("--strain-mhz", type=float, default=3.0)
    p.add_argument("--field-gauss", type=float, default=0.1)
    p.add_argument("--n-times", type=int, default=601)
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensor = SensorConfig("A", axis=(0.0, 0.0, 1.0), strain=to_angular(args.strain_mhz))
    field = FieldConfig(args.field_gauss)
    if args.long_range:
        n, times, r0 = 100, np.linspace(50, 300, args.n_times), 15.0
        radii = np.linspace(10, 20, 101)
    else:
        n, times, r0 = 30, np.linspace(1, 100, args.n_times), 5.0
        radii = np.linspace(4, 10, 121)
    thetas = np.linspace(0, 180, 181)

    tag = f"cpmg{n}"
    rows = sweep(sensor, field, n, times, [(r0, th) for th in thetas], args.engine)
    write(out / f"{tag}_theta_map_R{r0:g}nm.csv", "theta_deg", thetas, times, rows)
    rows = sweep(sensor, field, n, times, [(r, 30.0) for r in radii], args.engine)
    write(out / f"{tag}_R_map_theta30deg.csv", "r_nm", radii, times, rows)


if __name__ == "__main__":
    main()
