"""Print a compact table of mean metrics per cell from a results.csv."""

import argparse
import csv
from collections import defaultdict

import numpy as np

KEYS = ("method", "rho_true", "rho_est", "n", "d", "copula", "marginal")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("results")
    p.add_argument("--metric", default="mse", choices=["mse", "interval_score", "coverage", "mean_width", "gap"])
    args = p.parse_args()
    cells = defaultdict(list)
    with open(args.results, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["error"] or row[args.metric] == "":
                continue
            est = "" if row["method"] == "rcp_misspec" else row["rho_est"]
            cells[tuple(row[k] if k != "rho_est" else est for k in KEYS)].append(float(row[args.metric]))
    print(" ".join(f"{k:>10}" for k in KEYS) + f" {args.metric + '_mean':>14} {'sd':>9} {'reps':>5}")
    for key in sorted(cells, key=lambda k: (k[0], k[3], k[1], k[2], k[5], k[6])):
        v = np.array(cells[key])
        sd = v.std(ddof=1) if v.size > 1 else 0.0
        print(" ".join(f"{k:>10}" for k in key) + f" {v.mean():>14.5f} {sd:>9.5f} {v.size:>5}")


if __name__ == "__main__":
    main()
