#!/usr/bin/env python3
"""Desk-scale end-to-end experiment.

Generates a seeded phantom dataset with a patient-level train/test split,
fits the contour shape model, trains the synthesis network, paints sampled
lesions onto held-out healthy slices, scores lesion texture realism
against the held-out real lesions, and renders the report figures.

Usage:
    python scripts/desk_pipeline.py --out runs/desk --seed 7 --iterations 5000
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from lfg import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--count", type=int, default=250)
    ap.add_argument("--dims", default="64,64")
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--masks-per-slice", type=int, default=5)
    args = ap.parse_args(argv)

    out = Path(args.out)
    t0 = time.monotonic()
    train_manifest = out / "data" / "train" / "manifest.txt"
    test_manifest = out / "data" / "test" / "manifest.txt"

    steps = [
        ["phantom", "--seed", str(args.seed), "--count", str(args.count),
         "--dims", args.dims, "--split", "0.8,0,0.2", "--out", str(out / "data")],
        ["shape-fit", "--manifest", str(train_manifest), "--out", str(out / "shape.lsm")],
        ["synth-train", "--manifest", str(train_manifest), "--out", str(out / "run"),
         "--iterations", str(args.iterations), "--seed", str(args.seed)],
        ["synthesize", "--manifest", str(test_manifest), "--model", str(out / "shape.lsm"),
         "--checkpoint", str(out / "run" / f"checkpoint_{args.iterations:07d}.lfgc"),
         "--out", str(out / "synthetic"), "--masks-per-slice", str(args.masks_per_slice),
         "--train-manifest", str(train_manifest), "--seed", str(args.seed)],
        ["eval-texture", "--real", str(test_manifest),
         "--synthetic", str(out / "synthetic" / "manifest.txt"),
         "--out", str(out / "run")],
        ["report", "--run", str(out / "run")],
    ]
    for step in steps:
        print(f"== lfg {' '.join(step)}", file=sys.stderr)
        rc = cli.main(step)
        if rc != 0:
            print(f"step failed with exit code {rc}", file=sys.stderr)
            return rc

    wall = time.monotonic() - t0

    # summary: smoothed loss ratio (final window vs window ending at 500)
    totals = []
    with open(out / "run" / "telemetry.csv") as f:
        for rec in csv.DictReader(f):
            totals.append(float(rec["total"]))
    window = 100
    early = sum(totals[400:500]) / window if len(totals) >= 500 else float("nan")
    late = sum(totals[-window:]) / window if len(totals) >= window else float("nan")
    print(f"smoothed total loss: window@500 = {early:.4f}, final = {late:.4f}, "
          f"ratio = {late / early:.3f}" if early == early else "run too short for ratio")

    with open(out / "run" / "kl_summary.csv") as f:
        for rec in csv.DictReader(f):
            print(f"KL[{rec['feature']}] = {float(rec['kl']):.4f} "
                  f"(n_real={rec['n_real']}, n_synthetic={rec['n_synthetic']})")
    print(f"wall time: {wall / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
