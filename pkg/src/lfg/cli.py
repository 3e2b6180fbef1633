"""Command-line entry point tying the pipeline together.

Subcommands: phantom, preprocess, shape-fit, shape-sample, synth-train,
synthesize, eval-texture, seg-train, seg-eval, report. Every subcommand is
idempotent given the same configuration and seed: outputs carry no
timestamps, so repeated runs are byte-identical.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 data error,
5 numeric abort.

Heavy imports happen inside the handlers so that --threads can pin the
BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _dims(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("dims must look like H,W")
    return int(parts[0]), int(parts[1])


def _seed_list(text: str):
    return [int(p) for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lfg",
        description="Free-form lesion synthesis: shape-model masks, a "
                    "partial-convolution GAN, radiomics scoring, and "
                    "segmentation-augmentation evaluation.")
    ap.add_argument("--threads", type=int, default=0,
                    help="BLAS/OpenMP thread cap (0 = library default)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a deterministic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--dims", type=_dims, default=(64, 64))
    p.add_argument("--lesion-rate", type=float, default=0.5)
    p.add_argument("--slices-per-patient", type=int, default=5)
    p.add_argument("--split", default=None, metavar="TR,VA,TE",
                   help="patient-level ratios; writes train/ val/ test/ subsets")

    p = sub.add_parser("preprocess", help="window/resize/filter a raw dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=float, default=-100.0)
    p.add_argument("--hi", type=float, default=200.0)
    p.add_argument("--size", type=_dims, default=None)
    p.add_argument("--min-lesion-px", type=int, default=10)
    p.add_argument("--no-roi", action="store_true",
                   help="keep pixels outside the liver contour")

    p = sub.add_parser("shape-fit", help="fit the contour shape model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=int, default=10)
    p.add_argument("--min-lesion-px", type=int, default=10)

    p = sub.add_parser("shape-sample", help="sample contour shapes to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-train", help="train the synthesis network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("synthesize", help="paint sampled lesions onto healthy slices")
    p.add_argument("--manifest", required=True, help="healthy source slices")
    p.add_argument("--model", required=True, help="shape model file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=None, help="slices to use (default all healthy)")
    p.add_argument("--masks-per-slice", type=int, default=1)
    p.add_argument("--size-lo", type=float, default=None)
    p.add_argument("--size-hi", type=float, default=None)
    p.add_argument("--train-manifest", default=None,
                   help="derive the size range from this set's lesion areas")

    p = sub.add_parser("eval-texture", help="compare lesion texture distributions")
    p.add_argument("--real", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=32)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--kl-eps", type=float, default=1e-2)

    p = sub.add_parser("seg-train", help="train the lesion segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("seg-eval", help="evaluate a segmenter or run the "
                                        "augmentation comparison")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None, help="test slices for --checkpoint mode")
    p.add_argument("--real", default=None)
    p.add_argument("--synthetic", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    p.add_argument("--config", default=None)

    p = sub.add_parser("report", help="render figures and tables for a run directory")
    p.add_argument("--run", required=True)
    return ap


# ----------------------------------------------------------------------
# handlers
# ----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    from . import imageio
    from .config import PipelineConfig, echo_config
    from .imageio import PhantomConfig
    cfg = PipelineConfig(seed=args.seed,
                         phantom=PhantomConfig(dims=args.dims,
                                               lesion_rate=args.lesion_rate,
                                               slices_per_patient=args.slices_per_patient))
    echo_config(cfg, args.out)
    records = imageio.generate_phantoms(args.seed, args.count, cfg.phantom)
    if args.split:
        ratios = tuple(float(p) for p in args.split.split(","))
        split = imageio.split_patients(records, ratios=ratios)
        for name, part in (("train", split.train), ("val", split.validation),
                           ("test", split.test)):
            if part:
                manifest = imageio.write_dataset(part, Path(args.out) / name)
                print(f"wrote {len(part)} {name} slices to {manifest}")
        return 0
    manifest = imageio.write_dataset(records, args.out)
    print(f"wrote {len(records)} slices to {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    from . import imageio
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = imageio.manifest_rows(args.manifest)
    base = Path(args.manifest).parent
    records = []
    rejected = 0
    for pid, img_name, liver_name, lesion_names in rows:
        raw = imageio.read_grid(base / img_name, raw=True)
        grid = imageio.window_normalize(raw, args.lo, args.hi)
        liver = imageio.read_grid(base / liver_name)
        lesions = [imageio.read_grid(base / n) for n in lesion_names]
        if args.size is not None:
            grid = imageio.resize(grid, args.size)
            liver = imageio.resize(liver, args.size)
            lesions = [imageio.resize(m, args.size) for m in lesions]
        record = imageio.SliceRecord(image=grid, liver=liver,
                                     lesions=lesions, patient_id=pid)
        if not args.no_roi:
            if liver.area == 0:
                rejected += 1
                print(f"rejecting {img_name}: empty liver mask", file=sys.stderr)
                continue
            record = imageio.SliceRecord(image=imageio.extract_liver_roi(record),
                                         liver=liver, lesions=lesions, patient_id=pid)
        records.append(record)
    records = imageio.filter_small_lesions(records, args.min_lesion_px)
    manifest = imageio.write_dataset(records, out)
    print(f"preprocessed {len(records)} slices -> {manifest}"
          + (f" ({rejected} rejected)" if rejected else ""))
    return 0


def cmd_shape_fit(args) -> int:
    from . import imageio, shapemodel
    records = imageio.read_dataset(args.manifest)
    pool = shapemodel.contour_pool_from_records(records, args.min_lesion_px)
    model = shapemodel.fit_shape_model(pool, n_modes=args.modes)
    shapemodel.save_shape_model(args.out, model)
    print(f"fitted {args.modes}-mode shape model from {len(pool)} contours -> {args.out}")
    return 0


def cmd_shape_sample(args) -> int:
    import numpy as np

    from . import shapemodel
    model = shapemodel.load_shape_model(args.model)
    rng = np.random.default_rng(args.seed)
    rows = [shapemodel.sample_shape(model, rng) for _ in range(args.count)]
    with open(args.out, "w") as f:
        for vec in rows:
            f.write(",".join(f"{v:.9e}" for v in vec) + "\n")
    print(f"sampled {args.count} shapes -> {args.out}")
    return 0


def cmd_synth_train(args) -> int:
    from . import imageio, pcgan, train
    from .config import echo_config, load_config
    from .losses import make_extractor

    overrides = {}
    if args.iterations is not None:
        overrides["train.iterations"] = args.iterations
    cfg = load_config(args.config, overrides)
    if args.seed is not None and os.environ.get("LFG_SEED") is None:
        cfg.seed = args.seed
        cfg.train = type(cfg.train)(**{**vars(cfg.train), "seed": args.seed})
    else:
        cfg.train = type(cfg.train)(**{**vars(cfg.train), "seed": cfg.seed})
    echo_config(cfg, args.out)

    records = imageio.read_dataset(args.manifest)
    lesioned = [r for r in records if r.has_lesion]
    if lesioned:
        hw = (lesioned[0].image.height, lesioned[0].image.width)
        if cfg.generator.input_hw != hw:
            cfg.generator = type(cfg.generator)(**{**vars(cfg.generator), "input_hw": hw})
    gen = pcgan.build_generator(cfg.generator, pcgan.InitSpec(seed=cfg.seed))
    disc = pcgan.build_discriminator(cfg.discriminator, pcgan.InitSpec(seed=cfg.seed + 1))
    extractor = make_extractor(cfg.extractor.kind, cfg.extractor.seed,
                               cfg.extractor.path or None)
    telemetry = train.train_loop(cfg.train, records, gen, disc, extractor,
                                 cfg.loss, args.out, resume_from=args.resume)
    print(f"training telemetry -> {telemetry}")
    return 0


def synthesize_records(healthy, shape_model, gen, rng, size_range,
                       masks_per_slice: int = 1):
    """Sampled-mask synthesis on lesion-free slices. Returns (records,
    source_indices): each record's image is the composite and its lesion
    masks are the placements; slices where no placement fit are skipped."""
    import numpy as np

    from . import nn, shapemodel
    from .errors import PlacementError
    from .imageio import IntensityGrid, SliceRecord

    out = []
    sources = []
    for si, rec in enumerate(healthy):
        placed = []
        for _ in range(masks_per_slice):
            vec = shapemodel.sample_shape(shape_model, rng)
            try:
                mask, _t = shapemodel.place_and_rasterize(vec, rec, rng, size_range)
            except PlacementError:
                continue
            placed.append(mask)
        if not placed:
            continue
        union = np.zeros_like(rec.image.values, dtype=np.uint8)
        for m in placed:
            union |= m.bits
        known = (1.0 - union.astype(np.float32))[None, None]
        x = rec.image.values[None, None].astype(np.float32)
        with nn.no_grad():
            x_hat = gen.forward(nn.Tensor(x * known), known, training=False)
        composite = x * known + x_hat.data * (1.0 - known)
        img = np.clip(composite[0, 0], 0.0, 1.0).astype(np.float32)
        out.append(SliceRecord(image=IntensityGrid(img), liver=rec.liver,
                               lesions=placed, patient_id=rec.patient_id))
        sources.append(si)
    return out, sources


def cmd_synthesize(args) -> int:
    import numpy as np

    from . import imageio, pcgan, shapemodel
    from .errors import ConfigError, DataError

    records = imageio.read_dataset(args.manifest)
    healthy = [r for r in records if not r.has_lesion]
    if not healthy:
        raise DataError("no lesion-free slices in the source manifest")
    if args.count is not None:
        healthy = healthy[:args.count]

    model = shapemodel.load_shape_model(args.model)
    gen, _disc, _cfg, _blocks = pcgan.load_checkpoint(args.checkpoint)

    if args.size_lo is not None and args.size_hi is not None:
        size_range = (args.size_lo, args.size_hi)
    elif args.train_manifest is not None:
        pool_records = imageio.read_dataset(args.train_manifest)
        areas = [m.area for r in pool_records for m in r.lesions]
        if not areas:
            raise DataError("train manifest has no lesions to derive sizes from")
        size_range = (float(np.percentile(areas, 10)), float(np.percentile(areas, 90)))
    else:
        raise ConfigError("synthesize needs --size-lo/--size-hi or --train-manifest")

    rng = np.random.default_rng(args.seed)
    out_records, sources = synthesize_records(healthy, model, gen, rng, size_range,
                                              masks_per_slice=args.masks_per_slice)
    if not out_records:
        raise DataError("no slice accepted a lesion placement")
    manifest = imageio.write_dataset(out_records, args.out)

    from .report import raster_panel_svg
    from .segeval import lesion_union
    panels = []
    for i, (si, rec) in enumerate(zip(sources, out_records)):
        panels.append((f"healthy {si}", healthy[si].image.values, None))
        panels.append((f"synthetic {si}", rec.image.values, lesion_union(rec)))
        if len(panels) >= 6:
            break
    raster_panel_svg(Path(args.out) / "preview.svg", panels)
    print(f"synthesized {len(out_records)} slices -> {manifest}")
    return 0


def cmd_eval_texture(args) -> int:
    from . import imageio, radiomics
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = radiomics.RadiomicsConfig(levels=args.levels, bins=args.bins)
    real = imageio.read_dataset(args.real)
    synth = imageio.read_dataset(args.synthetic)
    rows = radiomics.feature_table(real, "real", cfg) + \
        radiomics.feature_table(synth, "synthetic", cfg)
    with open(out / "features.csv", "w") as f:
        f.write("lesion_id,source,energy,correlation\n")
        for rid, source, energy, corr in rows:
            f.write(f"{rid},{source},{energy:.9e},{corr:.9e}\n")

    with open(out / "kl_summary.csv", "w") as f:
        f.write("feature,kl,n_real,n_synthetic\n")
        for feat, col in (("energy", 2), ("correlation", 3)):
            rv = [r[col] for r in rows if r[1] == "real"]
            sv = [r[col] for r in rows if r[1] == "synthetic"]
            cmpres = radiomics.compare_feature_sets(rv, sv, feat, bins=args.bins,
                                                    eps=args.kl_eps)
            f.write(f"{feat},{cmpres.kl:.9e},{len(rv)},{len(sv)}\n")
    print(f"texture comparison -> {out}")
    return 0


def cmd_seg_train(args) -> int:
    from . import imageio, segeval
    from .config import echo_config, load_config
    overrides = {}
    if args.epochs is not None:
        overrides["segmenter.epochs"] = args.epochs
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.segmenter = type(cfg.segmenter)(**{**vars(cfg.segmenter), "seed": args.seed})
    records = imageio.read_dataset(args.manifest)
    hw = (records[0].image.height, records[0].image.width)
    if cfg.segmenter.input_hw != hw:
        cfg.segmenter = type(cfg.segmenter)(**{**vars(cfg.segmenter), "input_hw": hw})
    echo_config(cfg, args.out)
    folds = None
    if args.folds is not None:
        pids = sorted(imageio.patient_ids(records))
        folds = {pid: i % args.folds for i, pid in enumerate(pids)}
    segeval.train_segmenter(cfg.segmenter, records, folds=folds, out_dir=args.out)
    print(f"segmenter checkpoint(s) -> {args.out}")
    return 0


def cmd_seg_eval(args) -> int:
    from . import imageio, segeval
    from .errors import ConfigError
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.checkpoint is not None:
        if args.manifest is None:
            raise ConfigError("--checkpoint mode needs --manifest test slices")
        model = segeval.load_segmenter(args.checkpoint)
        records = imageio.read_dataset(args.manifest)
        metrics = []
        with open(out / "metrics.csv", "w") as f:
            f.write("index,patient_id,dsc,vpsc,vsen\n")
            for i, rec in enumerate(records):
                union = imageio.LesionMask(
                    segeval.lesion_union(rec))
                m = segeval.seg_metrics(segeval.predict_mask(model, rec), union)
                metrics.append(m)
                f.write(f"{i},{rec.patient_id},{m.dsc:.6f},{m.vpsc:.6f},{m.vsen:.6f}\n")
        s = segeval.aggregate_metrics(metrics)
        print(f"DSC {s.dsc_mean:.2f}±{s.dsc_std:.2f}  vPSC {s.vpsc_mean:.2f}±{s.vpsc_std:.2f}"
              f"  vSEN {s.vsen_mean:.2f}±{s.vsen_std:.2f}  (n={s.n})")
        return 0

    if not (args.real and args.synthetic and args.test):
        raise ConfigError("seg-eval needs either --checkpoint/--manifest or "
                          "--real/--synthetic/--test")
    from .config import echo_config, load_config
    cfg = load_config(args.config)
    real = imageio.read_dataset(args.real)
    synth = imageio.read_dataset(args.synthetic)
    test = imageio.read_dataset(args.test)
    hw = (test[0].image.height, test[0].image.width)
    if cfg.segmenter.input_hw != hw:
        cfg.segmenter = type(cfg.segmenter)(**{**vars(cfg.segmenter), "input_hw": hw})
    echo_config(cfg, out)
    segeval.run_augmentation_experiment(real, synth, test, args.seeds,
                                        cfg.segmenter, out)
    from .report import comparison_text_table
    (out / "comparison_table.txt").write_text(comparison_text_table(out / "comparison.csv"))
    print(f"comparison table -> {out / 'comparison.csv'}")
    return 0


def cmd_report(args) -> int:
    from .report import render_run_reports
    written = render_run_reports(args.run)
    for name in written:
        print(f"wrote {name}")
    return 0


_HANDLERS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "shape-fit": cmd_shape_fit,
    "shape-sample": cmd_shape_sample,
    "synth-train": cmd_synth_train,
    "synthesize": cmd_synthesize,
    "eval-texture": cmd_eval_texture,
    "seg-train": cmd_seg_train,
    "seg-eval": cmd_seg_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import ConfigError, DataError, NumericAbort
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
