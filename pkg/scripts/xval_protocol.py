#!/usr/bin/env python3
"""Four-fold cross-validation over twelve synthetic stationary-camera sequences.

Mirrors the evaluation protocol at toy scale: sequence-level folds, one
network per (seed, fold), per-fold reports and a pooled report.

    python scripts/xval_protocol.py --epochs 10 --seeds 0,1,2,3,4
"""

import argparse
import sys
from pathlib import Path

from mcseg.cli import main as mcseg
from mcseg.metrics import final_means, read_report_csv

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/xval")
    ap.add_argument("--config", default=str(HERE / "toy.json"))
    ap.add_argument("--variant", default="dual_diff")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--folds", type=int, default=4)
    args = ap.parse_args()

    out = Path(args.out)
    base = ["--config", args.config, "--variant", args.variant]
    steps = [
        ["synth", "--out", str(out / "data"), "--set", "synth.count=12", "--set", 'synth.prefix="seq"'],
        ["xval", "--data", str(out / "data"), "--out", str(out), "--seeds", args.seeds, "--epochs",
         str(args.epochs), "--set", f"folds={args.folds}", "-v"],
    ]
    for cmd in steps:
        code = mcseg(cmd + base)
        if code:
            sys.exit(code)
    for k in range(args.folds):
        rows, agg = read_report_csv(out / "xval" / f"fold{k}.csv")
        f, j = final_means(agg)[("default", args.variant)]
        print(f"fold {k}: tests {sorted({r.sequence for r in rows})}  F {f:.3f} IoU {j:.3f}")
    _, agg = read_report_csv(out / "xval" / "pooled.csv")
    f, j = final_means(agg)[("default", args.variant)]
    print(f"pooled: F {f:.3f} IoU {j:.3f}")


if __name__ == "__main__":
    main()
