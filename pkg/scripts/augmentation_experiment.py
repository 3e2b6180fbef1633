#!/usr/bin/env python3
"""Segmentation-augmentation comparison at desk scale.

Trains the segmenter twice per seed (real slices only vs real plus
synthetic slices), evaluates both regimes on the same held-out slices,
and emits the comparison table. Expects a completed desk pipeline run
(for the shape model and synthesis checkpoint) or builds its own
synthetic set from the given checkpoint.

Usage:
    python scripts/augmentation_experiment.py --out runs/aug \
        --train runs/desk/data/train/manifest.txt \
        --test runs/desk/data/test/manifest.txt \
        --model runs/desk/shape.lsm \
        --checkpoint runs/desk/run/checkpoint_0005000.lfgc \
        --seeds 0,1,2
"""

import argparse
import sys
from pathlib import Path

from lfg import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--train", required=True, help="real training manifest")
    ap.add_argument("--test", required=True, help="held-out test manifest")
    ap.add_argument("--model", required=True, help="shape model file")
    ap.add_argument("--checkpoint", required=True, help="synthesis checkpoint")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--real-slices", type=int, default=100)
    ap.add_argument("--synthetic-slices", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--seed", type=int, default=7, help="synthesis placement seed")
    args = ap.parse_args(argv)

    out = Path(args.out)
    synth_dir = out / "synthetic"
    rc = cli.main(["synthesize", "--manifest", args.train, "--model", args.model,
                   "--checkpoint", args.checkpoint, "--out", str(synth_dir),
                   "--count", str(args.synthetic_slices), "--masks-per-slice", "1",
                   "--train-manifest", args.train, "--seed", str(args.seed)])
    if rc != 0:
        return rc


    from lfg import imageio, segeval
    from lfg.config import load_config

    real = [r for r in imageio.read_dataset(args.train) if r.has_lesion]
    real = real[:args.real_slices]
    synthetic = imageio.read_dataset(synth_dir / "manifest.txt")[:args.synthetic_slices]
    # evaluate on lesion-bearing held-out slices (the segmentation task)
    test = [r for r in imageio.read_dataset(args.test) if r.has_lesion]

    cfg = load_config(None).segmenter
    hw = (test[0].image.height, test[0].image.width)
    cfg = type(cfg)(**{**vars(cfg), "input_hw": hw, "epochs": args.epochs, "lr": 3e-3})
    seeds = [int(s) for s in args.seeds.split(",")]
    table = segeval.run_augmentation_experiment(real, synthetic, test, seeds, cfg, out)
    for seed in seeds:
        print(f"seed {seed}: DSC delta (real+syn - real) = {table.dsc_deltas[seed]:+.3f}")
    rc = cli.main(["report", "--run", str(out)])
    return rc


if __name__ == "__main__":
    sys.exit(main())
