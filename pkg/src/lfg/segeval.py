"""Segmentation metrics, a small U-shaped segmenter, and the
augmentation-comparison harness.

Metrics are per-slice percentages: overlap (DSC), precision (vPSC), and
sensitivity (vSEN) of the predicted vs ground-truth lesion area. Empty
denominators are totalized: both masks empty scores 100 everywhere; an
empty prediction against a nonempty truth scores 0 with a flag (and
symmetrically for an empty truth). Per-patient aggregation is available
via `per_patient=True` on the aggregate helper.

The segmenter is a plain conv U-Net (standard convolutions, stride-2
downsampling, nearest upsampling + skip concatenation) trained with the
cross-entropy + Dice objective under AMSGrad.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import container, nn
from .errors import ConfigError, DataError
from .imageio import LesionMask, SliceRecord, patient_ids, write_grid
from .losses import ce_dice_loss
from .train import AMSGrad, batch_indices

MAGIC_SEGMENTER = b"LFGC"


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

@dataclass
class SegMetrics:
    dsc: float
    vpsc: float
    vsen: float
    pred_empty: bool = False
    gt_empty: bool = False


def seg_metrics(pred, gt) -> SegMetrics:
    p = pred.bits if hasattr(pred, "bits") else np.asarray(pred)
    g = gt.bits if hasattr(gt, "bits") else np.asarray(gt)
    if p.shape != g.shape:
        raise DataError(f"prediction {p.shape} and truth {g.shape} dims differ")
    p = p.astype(bool)
    g = g.astype(bool)
    inter = int((p & g).sum())
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return SegMetrics(100.0, 100.0, 100.0, pred_empty=True, gt_empty=True)
    dsc = 200.0 * inter / (np_ + ng)
    vpsc = 100.0 * inter / np_ if np_ else 0.0
    vsen = 100.0 * inter / ng if ng else 0.0
    return SegMetrics(dsc, vpsc, vsen, pred_empty=(np_ == 0), gt_empty=(ng == 0))


@dataclass
class MetricSummary:
    dsc_mean: float
    dsc_std: float
    vpsc_mean: float
    vpsc_std: float
    vsen_mean: float
    vsen_std: float
    n: int


def aggregate_metrics(per_image: list[SegMetrics],
                      patient_of: list[str] | None = None,
                      per_patient: bool = False) -> MetricSummary:
    """Mean and std over slices, or over patient-mean values when
    per_patient is set."""
    if not per_image:
        raise DataError("no metrics to aggregate")
    rows = np.array([[m.dsc, m.vpsc, m.vsen] for m in per_image], dtype=np.float64)
    if per_patient:
        if patient_of is None or len(patient_of) != len(per_image):
            raise DataError("per-patient aggregation needs a patient id per image")
        groups: dict[str, list[int]] = {}
        for i, pid in enumerate(patient_of):
            groups.setdefault(pid, []).append(i)
        rows = np.array([rows[idx].mean(axis=0) for idx in groups.values()])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return MetricSummary(mean[0], std[0], mean[1], std[1], mean[2], std[2], len(rows))


# ----------------------------------------------------------------------
# segmenter network
# ----------------------------------------------------------------------

@dataclass
class SegConfig:
    input_hw: tuple[int, int] = (64, 64)
    stages: int = 3
    base_channels: int = 8
    batch: int = 16
    epochs: int = 150
    lr: float = 3e-4
    threshold: float = 0.5
    seed: int = 0
    w_ce: float = 0.5
    w_dice: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("invalid segmenter training configuration")
        h, w = self.input_hw
        if h % (2 ** (self.stages - 1)) or w % (2 ** (self.stages - 1)):
            raise ConfigError("input dims must be divisible by 2^(stages-1)")


class _ConvBlock:
    def __init__(self, rng, cin, cout, stride):
        w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3)).astype(np.float32)
        self.params = nn.ConvParams(nn.Tensor(w, requires_grad=True),
                                    nn.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True),
                                    stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(cout)

    def __call__(self, x, training):
        return nn.relu(self.bn(nn.conv2d(x, self.params), training))


class SegmenterNet:
    def __init__(self, config: SegConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        b = config.base_channels
        chans = [b * (2 ** i) for i in range(config.stages)]
        self.down = [_ConvBlock(rng, 1 if i == 0 else chans[i - 1], chans[i],
                                stride=1 if i == 0 else 2)
                     for i in range(config.stages)]
        self.mid = _ConvBlock(rng, chans[-1], chans[-1], stride=1)
        self.up = []
        for i in range(config.stages - 2, -1, -1):
            self.up.append(_ConvBlock(rng, chans[i + 1] + chans[i], chans[i], stride=1))
        w = rng.normal(0.0, np.sqrt(2.0 / chans[0]), size=(1, chans[0], 1, 1)).astype(np.float32)
        self.head = nn.ConvParams(nn.Tensor(w, requires_grad=True),
                                  nn.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
                                  stride=1, padding=0)

    def forward(self, x, training: bool = False) -> nn.Tensor:
        """Probability map in (0,1), same dims as the input."""
        x = nn.as_tensor(x)
        feats = []
        h = x
        for blk in self.down:
            h = blk(h, training)
            feats.append(h)
        h = self.mid(h, training)
        for i, blk in enumerate(self.up):
            h = nn.upsample2x(h)
            skip = feats[len(self.down) - 2 - i]
            h = blk(nn.concat_channels(h, skip), training)
        logits = nn.conv2d(h, self.head)
        logits = nn.clip(logits, -30.0, 30.0)
        one = nn.Tensor(np.asarray(1.0, dtype=logits.dtype))
        return one / (one + nn.texp(nn.neg(logits)))

    def parameters(self) -> dict[str, nn.Tensor]:
        out = {}
        blocks = ([(f"down{i}", blk) for i, blk in enumerate(self.down)]
                  + [("mid", self.mid)]
                  + [(f"up{i}", blk) for i, blk in enumerate(self.up)])
        for name, blk in blocks:
            out[f"{name}.weight"] = blk.params.weight
            out[f"{name}.bias"] = blk.params.bias
            out[f"{name}.bn.gamma"] = blk.bn.gamma
            out[f"{name}.bn.beta"] = blk.bn.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        blocks = ([(f"down{i}", blk) for i, blk in enumerate(self.down)]
                  + [("mid", self.mid)]
                  + [(f"up{i}", blk) for i, blk in enumerate(self.up)])
        for name, blk in blocks:
            out[f"{name}.bn.running_mean"] = blk.bn.running_mean
            out[f"{name}.bn.running_var"] = blk.bn.running_var
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]):
        items = ([(f"down{i}", blk) for i, blk in enumerate(self.down)]
                 + [("mid", self.mid)]
                 + [(f"up{i}", blk) for i, blk in enumerate(self.up)])
        for name, blk in items:
            blk.bn.running_mean = blocks[f"{name}.bn.running_mean"].copy()
            blk.bn.running_var = blocks[f"{name}.bn.running_var"].copy()


def save_segmenter(path, model: SegmenterNet):
    cfg = {"segmenter": {k: list(v) if isinstance(v, tuple) else v
                         for k, v in vars(model.config).items()}}
    blocks = {f"p.{k}": v.data for k, v in model.parameters().items()}
    blocks.update({f"s.{k}": v for k, v in model.state_arrays().items()})
    container.write_blocks(path, MAGIC_SEGMENTER, cfg, blocks)


def load_segmenter(path) -> SegmenterNet:
    cfg, blocks = container.read_blocks(path, MAGIC_SEGMENTER)
    raw = dict(cfg["segmenter"])
    raw["input_hw"] = tuple(raw["input_hw"])
    model = SegmenterNet(SegConfig(**raw))
    for k, p in model.parameters().items():
        p.data = blocks[f"p.{k}"].copy()
    model.load_state_arrays({k[2:]: v for k, v in blocks.items() if k.startswith("s.")})
    return model


# ----------------------------------------------------------------------
# training and prediction
# ----------------------------------------------------------------------

def lesion_union(record: SliceRecord) -> np.ndarray:
    union = np.zeros_like(record.image.values, dtype=np.uint8)
    for m in record.lesions:
        union |= m.bits
    return union


def train_segmenter(config: SegConfig, records, folds: dict[str, int] | None = None,
                    out_dir=None):
    """Train on all records, or one model per fold (trained on the other
    folds) when a fold assignment is given. Returns a SegmenterNet or a
    {fold: SegmenterNet} dict; per-step losses go to seg_telemetry.csv and
    the checkpoint to segmenter.lfgc under out_dir when given."""
    records = list(records)
    if not records:
        raise DataError("segmenter training set is empty")
    if folds is not None:
        models = {}
        for fold in sorted(set(folds.values())):
            subset = [r for r in records if folds.get(r.patient_id) != fold]
            if not subset:
                raise DataError(f"fold {fold} leaves an empty training set")
            sub_dir = Path(out_dir) / f"fold{fold}" if out_dir else None
            models[fold] = train_segmenter(config, subset, folds=None, out_dir=sub_dir)
        return models

    model = SegmenterNet(config)
    opt = AMSGrad(model.parameters(), config.lr)
    images = np.stack([r.image.values for r in records])[:, None].astype(np.float32)
    targets = np.stack([lesion_union(r) for r in records])[:, None].astype(np.float32)

    n = len(records)
    steps_per_epoch = max(1, int(np.ceil(n / config.batch)))
    total_steps = config.epochs * steps_per_epoch
    loss_rows = []
    for step in range(1, total_steps + 1):
        idx = batch_indices(config.seed, n, min(config.batch, n), step)
        probs = model.forward(nn.Tensor(images[idx]), training=True)
        loss = ce_dice_loss(probs, targets[idx], config.w_ce, config.w_dice)
        opt.zero_grad()
        loss.backward()
        opt.step()
        opt.zero_grad()
        loss_rows.append((step, float(loss.data)))
        if step % 200 == 0:
            print(f"[seg] step {step}/{total_steps} loss={float(loss.data):.4f}",
                  file=sys.stderr)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "seg_telemetry.csv", "w") as f:
            f.write("step,loss\n")
            for step, val in loss_rows:
                f.write(f"{step},{val:.6e}\n")
        save_segmenter(out_dir / "segmenter.lfgc", model)
    return model


def predict_mask(model: SegmenterNet, record: SliceRecord,
                 threshold: float | None = None) -> LesionMask:
    thr = model.config.threshold if threshold is None else threshold
    with nn.no_grad():
        probs = model.forward(nn.Tensor(record.image.values[None, None]), training=False)
    return LesionMask((probs.data[0, 0] >= thr).astype(np.uint8))


# ----------------------------------------------------------------------
# augmentation experiment
# ----------------------------------------------------------------------

REGIME_REAL = "real"
REGIME_AUG = "real+syn"


@dataclass
class RegimeRun:
    regime: str
    seed: int
    per_image: list[SegMetrics]
    summary: MetricSummary
    prediction_paths: list[str]


@dataclass
class ComparisonTable:
    runs: list[RegimeRun]
    dsc_deltas: dict[int, float]

    def pooled(self, regime: str) -> MetricSummary:
        per_image = [m for run in self.runs if run.regime == regime for m in run.per_image]
        return aggregate_metrics(per_image)


def run_augmentation_experiment(real_train, synthetic, test, seeds,
                                config: SegConfig, out_dir) -> ComparisonTable:
    """Train the two regimes (real only vs real + synthetic) under
    identical seeds and config, evaluate both on the same test slices,
    persist every prediction mask, and report per-seed DSC deltas."""
    real_train, synthetic, test = list(real_train), list(synthetic), list(test)
    if not test:
        raise DataError("test set is empty")
    overlap = (patient_ids(real_train) | patient_ids(synthetic)) & patient_ids(test)
    if overlap:
        raise DataError(f"patients {sorted(overlap)} appear in both train and test")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    runs = []
    deltas = {}
    for seed in seeds:
        per_regime = {}
        for regime, train_set in ((REGIME_REAL, real_train),
                                  (REGIME_AUG, real_train + synthetic)):
            cfg = replace(config, seed=seed)
            model = train_segmenter(cfg, train_set)
            metrics, paths = [], []
            pred_dir = out_dir / f"seed{seed}" / regime.replace("+", "_")
            pred_dir.mkdir(parents=True, exist_ok=True)
            for i, rec in enumerate(test):
                pred = predict_mask(model, rec)
                path = pred_dir / f"pred_{i:05d}.lfg"
                write_grid(path, pred)
                metrics.append(seg_metrics(pred, LesionMask(lesion_union(rec))))
                paths.append(str(path.relative_to(out_dir)))
            run = RegimeRun(regime=regime, seed=seed, per_image=metrics,
                            summary=aggregate_metrics(metrics), prediction_paths=paths)
            per_regime[regime] = run
            runs.append(run)
        deltas[seed] = (per_regime[REGIME_AUG].summary.dsc_mean
                        - per_regime[REGIME_REAL].summary.dsc_mean)
        print(f"[experiment] seed {seed}: DSC delta (real+syn - real) = "
              f"{deltas[seed]:+.3f}", file=sys.stderr)

    table = ComparisonTable(runs=runs, dsc_deltas=deltas)
    write_comparison_csv(out_dir / "comparison.csv", table)
    write_per_image_csv(out_dir / "per_image.csv", table)
    return table


def write_comparison_csv(path, table: ComparisonTable):
    with open(path, "w") as f:
        f.write("regime,seed,n,dsc_mean,dsc_std,vpsc_mean,vpsc_std,vsen_mean,vsen_std\n")
        for run in table.runs:
            s = run.summary
            f.write(f"{run.regime},{run.seed},{s.n},{s.dsc_mean:.6f},{s.dsc_std:.6f},"
                    f"{s.vpsc_mean:.6f},{s.vpsc_std:.6f},{s.vsen_mean:.6f},{s.vsen_std:.6f}\n")
        for regime in (REGIME_REAL, REGIME_AUG):
            if any(r.regime == regime for r in table.runs):
                s = table.pooled(regime)
                f.write(f"{regime},pooled,{s.n},{s.dsc_mean:.6f},{s.dsc_std:.6f},"
                        f"{s.vpsc_mean:.6f},{s.vpsc_std:.6f},{s.vsen_mean:.6f},{s.vsen_std:.6f}\n")
        for seed, delta in sorted(table.dsc_deltas.items()):
            f.write(f"delta_dsc,{seed},,{delta:.6f},,,,,\n")


def write_per_image_csv(path, table: ComparisonTable):
    with open(path, "w") as f:
        f.write("regime,seed,index,prediction,dsc,vpsc,vsen\n")
        for run in table.runs:
            for i, (m, p) in enumerate(zip(run.per_image, run.prediction_paths)):
                f.write(f"{run.regime},{run.seed},{i},{p},"
                        f"{m.dsc:.6f},{m.vpsc:.6f},{m.vsen:.6f}\n")
