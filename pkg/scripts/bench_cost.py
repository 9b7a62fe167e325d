#!/usr/bin/env python3
"""Per-frame cost of frame differencing vs Horn-Schunck at several resolutions.

    python scripts/bench_cost.py --resolutions 240p 480p --iterations 100
"""

import argparse
import csv
import sys
from pathlib import Path

from mcseg.cli import main as mcseg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--data", help="dataset root; the first sequence supplies the frames")
    ap.add_argument("--resolutions", nargs="+", default=["240p", "480p"])
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cmd = ["bench", "--out", args.out, "--resolutions", ",".join(args.resolutions),
           "--repetitions", str(args.repetitions), "--threads", str(args.threads),
           "--set", f"bench.iterations={args.iterations}"]
    if args.data:
        cmd += ["--data", args.data]
    code = mcseg(cmd)
    if code:
        sys.exit(code)
    with open(Path(args.out) / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    worst = min(float(r["ratio"]) for r in rows)
    print(f"smallest horn_schunck / frame_diff ratio: {worst:.0f}x")


if __name__ == "__main__":
    main()
