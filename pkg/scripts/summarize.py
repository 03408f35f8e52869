"""Median-over-realizations table from an experiment CSV.

    python3 scripts/summarize.py results/fig2.csv --metric freq_err_rad
"""

import argparse
import csv
from collections import defaultdict

import numpy as np


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("csv")
    p.add_argument("--metric", default="freq_err")
    p.add_argument("--stat", choices=("median", "mean", "max"), default="median")
    args = p.parse_args(argv)

    cells = defaultdict(list)
    with open(args.csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] != args.metric or not row["realization"].isdigit():
                continue
            key = (float(row["delta0"]), float(row["sigma"]), int(row["N"]))
            cells[key, row["method"]].append(float(row["value"]))
    if not cells:
        raise SystemExit(f"no rows for metric {args.metric!r}")

    reduce = {"median": np.median, "mean": np.mean, "max": np.max}[args.stat]
    methods = sorted({m for _, m in cells})
    points = sorted({k for k, _ in cells})
    print(f"{args.metric} ({args.stat} over realizations)")
    print(f"{'delta0':>12} {'sigma':>6} {'N':>5} " + " ".join(f"{m:>11}" for m in methods))
    for d0, sg, n in points:
        vals = []
        for m in methods:
            v = cells.get(((d0, sg, n), m))
            vals.append(f"{reduce(v):11.3g}" if v else f"{'-':>11}")
        print(f"{d0:12.6g} {sg:6.3g} {n:5d} " + " ".join(vals))


if __name__ == "__main__":
    main()
