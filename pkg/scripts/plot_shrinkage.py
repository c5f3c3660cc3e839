#!/usr/bin/env python3
"""
Draw the shrinkage of a group offset toward the pooled mean as the group grows.

Usage:
    uv run scripts/plot_shrinkage.py --sizes 1,2,4,8,16,32,64 --out runs/shrinkage.svg
"""
from __future__ import annotations

import argparse
import math
from pathlib import Path

from mixedprefix.harness.plot import write_line_chart
from mixedprefix.lmm import shrinkage_curve


def main() -> None:
    parser = argparse.ArgumentParser(description="Plot the mixed-effects shrinkage curve.")
    parser.add_argument("--sizes", default="1,2,4,8,16,32,64,128", help="Group sizes, comma separated")
    parser.add_argument("--sigma", type=float, default=1.0)
    parser.add_argument("--noise", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/shrinkage.svg")
    args = parser.parse_args()

    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = shrinkage_curve(sizes, args.sigma, args.noise, seed=args.seed)
    series = {
        "mixed": [(math.log2(r["n"]), r["mixed"]) for r in rows],
        "no pooling": [(math.log2(r["n"]), r["group_mean"]) for r in rows],
        "complete pooling": [(math.log2(r["n"]), r["pooled"]) for r in rows],
    }
    path = write_line_chart(Path(args.out), series, "Group estimate vs group size", "log2 group size", "estimate")
    for r in rows:
        print(f"n={r['n']:<5} weight={r['weight']:.3f} mixed={r['mixed']:.4f}")
    print(f"✅ Wrote {path}")


if __name__ == "__main__":
    main()
