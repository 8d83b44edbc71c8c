#!/usr/bin/env python3
"""Train/test error and complexity measures across hidden-layer widths."""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from pathgeo.protocols import hidden_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h-list", default="8,16,32,64,128,256,512")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--m-train", type=int, default=2000)
    ap.add_argument("--m-test", type=int, default=1000)
    ap.add_argument("--out", default="hidden_sweep.csv")
    args = ap.parse_args()

    h_list = [int(tok) for tok in args.h_list.split(",")]
    seeds = [int(tok) for tok in args.seeds.split(",")]
    rows = hidden_sweep(h_list, seeds, m_train=args.m_train, m_test=args.m_test, epochs=args.epochs)
    fields = ["H", "seed", "train_err", "test_err", "train_loss", "margin", "l2", "l1_path", "l2_path", "spectral"]
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in fields})
    for row in rows:
        print(f"H={row['H']:4d} seed={row['seed']} train_err={row['train_err']:.4f} test_err={row['test_err']:.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
