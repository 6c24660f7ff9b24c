#!/usr/bin/env python3
"""Tabulate closed-form retention and estimated FLOPs for a sweep of schedules.

    python scripts/schedule_sweep.py --preset llava15-13b --out sweep.csv

Every three-step schedule with layers on a stride of --stride is listed,
using a fixed ratio for every step.
"""

import argparse
import itertools

from kvmerge.pipeline import Schedule
from kvmerge.profiler import PRESETS, cost_report, default_windows
from kvmerge.io import write_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="llava15-13b", choices=sorted(PRESETS))
    parser.add_argument("--steps", type=int, default=3)
    parser.add_argument("--stride", type=int, default=4)
    parser.add_argument("--ratio", type=float, default=0.5)
    parser.add_argument("--out", default="sweep.csv")
    args = parser.parse_args()

    preset = PRESETS[args.preset]
    n_layers, v = preset.shape.layers, preset.vision_tokens
    vanilla = cost_report(v, Schedule(), preset.shape)
    windows = default_windows(args.steps)
    rows = []
    for lambdas in itertools.combinations(range(args.stride, n_layers, args.stride), args.steps):
        sched = Schedule(lambdas, windows, (args.ratio,) * args.steps)
        rep = cost_report(v, sched, preset.shape)
        rows.append([
            " ".join(map(str, lambdas)), rep.retention_ratio,
            rep.flops_estimate / vanilla.flops_estimate,
            rep.kv_bytes_estimate / vanilla.kv_bytes_estimate,
        ])
    rows.sort(key=lambda r: r[1])
    write_csv(args.out, ["layers", "retention", "flops_ratio", "kv_ratio"], rows)
    print(f"{len(rows)} schedules for {args.preset} written to {args.out}")


if __name__ == "__main__":
    main()
