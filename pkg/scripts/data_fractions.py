#!/usr/bin/env python3
"""Train-set size versus overfitting, no perturbation involved.

Sweeps nested train subsets at the default knobs with gamma=0 and
prints how the best-epoch gap shrinks and val Rmean climbs as data is
added. Subsets are prefixes of one seeded permutation, so each fraction
contains the smaller ones.
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

from wrf.cli import main as wrf_main

FRACTIONS = "0.2,0.4,0.6,0.8,1.0"


def read_summary(path: Path):
    by_value = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_value[float(row["value"])].append(row)
    return dict(sorted(by_value.items()))


def mean(rows, field):
    return sum(float(r[field]) for r in rows) / len(rows)


def run(out: Path, seeds: str) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "fractions.cfg"
    cfg.write_text(f"out_dir={out}\ngamma=0.0\n")
    rc = wrf_main(["sweep", "--config", str(cfg), "--param", "fraction",
                   "--values", FRACTIONS, "--seeds", seeds])
    if rc != 0:
        return rc
    summary = read_summary(out / "sweep_summary.csv")
    print(f"\n{'fraction':>8} {'val rmean':>10} {'gap':>8}")
    for value, rows in summary.items():
        print(f"{value:8.1f} {mean(rows, 'best_val_rmean'):10.3f} "
              f"{mean(rows, 'gap_at_best'):8.3f}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/data_fractions", type=Path)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    sys.exit(run(args.out, args.seeds))
