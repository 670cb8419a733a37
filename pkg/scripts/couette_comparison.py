"""Couette comparison of tignn, gnn and spnn on a reduced case count.

The full preset schedule (6000 epochs per variant) takes days on one core;
``--epochs`` and ``--cases`` scale it down. ``--probe N`` only times N epochs
per variant and prints the projected full-schedule runtime.

    python scripts/couette_comparison.py --cases 20 --probe 2
"""

import argparse
import json
import logging
import os
import time

import torch

from thermognn.experiments import compare, final_losses, generate
from thermognn.presets import experiment_preset

VARIANTS = ("tignn", "gnn", "spnn")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/couette")
    ap.add_argument("--cases", type=int, default=20)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--probe", type=int, metavar="N")
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    preset = experiment_preset("couette")
    preset["generator"]["n_cases"] = args.cases
    ds = generate(preset)
    full = args.epochs or preset["train"]["epochs"]

    if args.probe:
        total = 0.0
        for v in VARIANTS:
            cmp = compare(ds, preset, variants=(v,), splits=(), epochs=args.probe)
            per_epoch = cmp.seconds[v] / args.probe
            total += per_epoch * full
            print(f"{v:6s} {per_epoch:8.1f} s/epoch -> {per_epoch * full / 3600:6.1f} h for {full} epochs")
        print(f"projected total {total / 3600:.1f} h")
        return

    os.makedirs(args.out, exist_ok=True)
    cmp = compare(ds, preset, variants=VARIANTS, splits=("train", "test"), epochs=full)
    cmp.report.write_csv(os.path.join(args.out, "boxplots.csv"))
    cmp.report.write_traces(os.path.join(args.out, "traces.json"))
    summary = {v: {"test_median": cmp.medians(v), "seconds": cmp.seconds[v], "final": final_losses(cmp.states[v])}
               for v in VARIANTS}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    for v in VARIANTS:
        print(v, {k: round(x, 5) for k, x in summary[v]["test_median"].items()})


if __name__ == "__main__":
    main()
