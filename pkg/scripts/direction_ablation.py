#!/usr/bin/env python3
"""Perturbation-direction ablation: none vs random vs adversarial.

Trains a baseline (gamma=0) and a rho grid at a fixed 2% budget, where
rho is the per-step probability of perturbing along the gradient rather
than a random direction. rho=0 is the pure random variant, rho=1 the
pure adversarial one. Prints the three-way comparison and the full rho
trend of best-epoch val Rmean. The fit here is deliberately fast and
high-variance; the budget is set so direction effects clear seed noise.
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

from wrf.cli import main as wrf_main

RHOS = "0,0.25,0.5,0.75,1"
GAMMA = 0.02

KNOBS = {
    "activation": "relu",
    "eta0": 0.012,
    "init_scale": 6.0,
}


def write_config(path: Path, out_dir: Path, **extra) -> None:
    entries = {"out_dir": out_dir, **KNOBS, **extra}
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def read_summary(path: Path):
    by_value = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_value[float(row["value"])].append(float(row["best_val_rmean"]))
    return {v: sum(rows) / len(rows) for v, rows in sorted(by_value.items())}


def run(out: Path, seeds: str) -> int:
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = out / "baseline.cfg"
    write_config(base_cfg, out / "baseline", gamma=0.0)
    rc = wrf_main(["sweep", "--config", str(base_cfg), "--param", "gamma",
                   "--values", "0", "--seeds", seeds])
    if rc != 0:
        return rc
    grid_cfg = out / "rho_grid.cfg"
    write_config(grid_cfg, out / "rho_grid", gamma=GAMMA)
    rc = wrf_main(["sweep", "--config", str(grid_cfg), "--param", "rho",
                   "--values", RHOS, "--seeds", seeds])
    if rc != 0:
        return rc

    base = read_summary(out / "baseline" / "sweep_summary.csv")[0.0]
    trend = read_summary(out / "rho_grid" / "sweep_summary.csv")
    print(f"\nbest-epoch val Rmean, seed means (budget gamma={GAMMA}):")
    print(f"  none        {base:7.3f}")
    print(f"  random      {trend[0.0]:7.3f}   (rho=0)")
    print(f"  adversarial {trend[1.0]:7.3f}   (rho=1)")
    print("\nrho trend: " + "  ".join(f"{rho:g}:{rm:.3f}" for rho, rm in trend.items()))
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/direction_ablation", type=Path)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    sys.exit(run(args.out, args.seeds))
