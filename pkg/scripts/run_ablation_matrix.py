#!/usr/bin/env python3
"""Run every single-axis ablation over several seeds and average the rows.

    python scripts/run_ablation_matrix.py --seeds 0 1 2 --out ablation_matrix.csv

Each axis is varied alone with the other strategy settings at their defaults.
"""

import argparse
from collections import defaultdict

from kvmerge.cli import AXES, ablation_rows
from kvmerge.config import RunConfig, parse_config
from kvmerge.io import write_csv

METRICS = ("final_tokens", "token_layers", "comparison_ops", "mean_fd", "guidance_mass_retained")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run config (defaults otherwise)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="ablation_matrix.csv")
    args = parser.parse_args()

    base = parse_config(args.config) if args.config else RunConfig()
    sums = defaultdict(lambda: [0.0] * len(METRICS))
    for seed in args.seeds:
        cfg = base.with_seed(seed)
        for axis in AXES:
            header, rows = ablation_rows(cfg, [axis])
            for row in rows:
                key = (axis, row[header.index(axis)])
                for k, name in enumerate(METRICS):
                    value = row[header.index(name)]
                    sums[key][k] += 0.0 if value is None else float(value)

    n = len(args.seeds)
    out = [[axis, value, *(s / n for s in totals)] for (axis, value), totals in sums.items()]
    write_csv(args.out, ["axis", "value", *METRICS], out)
    for row in out:
        print(f"{row[0]:>9} {row[1]:>13}  " + "  ".join(f"{x:10.4g}" for x in row[2:]))


if __name__ == "__main__":
    main()
