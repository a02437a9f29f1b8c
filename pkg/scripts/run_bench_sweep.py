#!/usr/bin/env python3
"""Desk-scale fusion benchmark sweep.

Runs the benchmark matrix over scaled-down versions of the reference models
with all three engines, then renders the speedup/scalability report and
plot-data CSVs. Sizes are shrunk by --scale so the whole sweep finishes in
minutes; size ratios between models are preserved, so trends carry over
even though absolute seconds do not.

    python scripts/run_bench_sweep.py --out-dir bench_out --scale 0.01
"""

import argparse
import os
from pathlib import Path

from fedagg.simbench import BenchSettings, ModelSpec, bench_fusion, report


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="bench_out")
    parser.add_argument("--scale", type=float, default=0.01)
    parser.add_argument("--models", default="cnn4.6,cnn73,resnetlike")
    parser.add_argument("--parties", default="10,50,250,1000")
    parser.add_argument("--reps", type=int, default=3)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"

    specs = [ModelSpec(name, scale=args.scale) for name in args.models.split(",")]
    parties = [int(p) for p in args.parties.split(",")]
    settings = BenchSettings(
        cores=os.cpu_count() or 1, workers=args.workers, seed=args.seed
    )
    rows = bench_fusion(
        specs, parties, ["local", "local-seq", "distributed"],
        reps=args.reps, out_csv=csv_path, settings=settings,
    )
    errors = [r for r in rows if r.error]
    print(f"swept {len(rows)} cells -> {csv_path} ({len(errors)} errors)")
    rep = report(csv_path, out_dir=out)
    print(rep.text())
    print(f"plot data: {out / 'phases.csv'}, {out / 'scalability.csv'}")
    return 1 if errors else 0


if __name__ == "__main__":
    raise SystemExit(main())
