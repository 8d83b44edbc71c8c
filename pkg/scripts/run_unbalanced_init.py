#!/usr/bin/env python3
"""Balanced vs unbalanced initialization at desk scale.

Trains a 100-unit MLP on a 2000-example image set from a balanced init
and from its rescaling-equivalent unbalanced twin, with plain and
preconditioned descent, and writes the four loss curves to one CSV.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pathgeo.protocols import unbalanced_init_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hidden", type=int, default=100)
    ap.add_argument("--m", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--sigma-log", type=float, default=1.0)
    ap.add_argument("--out", default="unbalanced_init.csv")
    args = ap.parse_args()

    out = unbalanced_init_experiment(seed=args.seed, hidden=args.hidden, m=args.m, epochs=args.epochs, sigma_log=args.sigma_log)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "init", "epoch", "train_loss", "train_err"])
        for method, runs in out.items():
            for tag, history in runs.items():
                for row in history:
                    w.writerow([method, tag, row["epoch"], repr(row["train_loss"]), repr(row["train_err"])])
    for method, runs in out.items():
        last_b = runs["balanced"][-1]["train_loss"]
        last_u = runs["unbalanced"][-1]["train_loss"]
        print(f"{method}: balanced {last_b:.6g}  unbalanced {last_u:.6g}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
