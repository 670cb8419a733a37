"""Train the metriplectic GNN and the black-box GNN on the damped chain and
compare rollout errors on the held-out cases.

    python scripts/chain_comparison.py --out runs/chain
"""

import argparse
import json
import logging
import os
import time

import torch

from thermognn.experiments import final_losses, run_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/chain")
    ap.add_argument("--epochs", type=int, help="override the preset epoch count")
    ap.add_argument("--variants", nargs="+", default=["tignn", "gnn"])
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    os.makedirs(args.out, exist_ok=True)

    t0 = time.perf_counter()
    cmp = run_preset("chain", variants=args.variants, splits=("train", "test"), epochs=args.epochs)
    cmp.report.write_csv(os.path.join(args.out, "boxplots.csv"))
    cmp.report.write_errors_csv(os.path.join(args.out, "errors.csv"))
    cmp.report.write_traces(os.path.join(args.out, "traces.json"))
    summary = {v: {"test_median": cmp.medians(v), "seconds": cmp.seconds[v],
                   "final": final_losses(cmp.states[v]), "best_epoch": cmp.states[v].best_epoch}
               for v in args.variants}
    summary["total_seconds"] = time.perf_counter() - t0
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    for v in args.variants:
        print(v, {k: round(x, 5) for k, x in summary[v]["test_median"].items()})


if __name__ == "__main__":
    main()
