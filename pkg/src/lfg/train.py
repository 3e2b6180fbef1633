"""AMSGrad optimizer and the synthesis training loop.

Each iteration takes one critic step followed by one generator step on the
same batch ("simultaneous" update, no extra critic steps). Telemetry goes
to a CSV with columns step, gan_d, gan_g, gp, rec, perc, tex, total,
wall_ms; with deterministic_outputs (the default) wall_ms is written as 0
so repeated runs are byte-identical, and measured timings go to stderr.
Checkpoints carry network parameters, optimizer state, batch-sampler rng
state, and the step counter, so a resumed run replays the exact trace of
an uninterrupted one.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container, nn, pcgan
from .errors import ConfigError, DataError, NumericAbort
from .losses import (FeatureExtractor, LossParts, LossWeights, composite_image,
                     perceptual_loss, reconstruction_loss, texture_loss,
                     total_loss, wgan_losses)

TELEMETRY_COLUMNS = ("step", "gan_d", "gan_g", "gp", "rec", "perc", "tex", "total", "wall_ms")


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    batch: int = 6
    iterations: int = 5000      # published runs used 500000
    seed: int = 0
    checkpoint_every: int = 1000
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    deterministic_outputs: bool = True

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


class AMSGrad:
    """AMSGrad with optional Adam-style bias correction (on by default).

    The running max of the second moment is non-decreasing elementwise;
    a step with any non-finite gradient is skipped entirely and counted.
    """

    def __init__(self, params: dict[str, nn.Tensor], lr: float,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
                 bias_correction: bool = True):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.bias_correction = bias_correction
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.vhat = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0
        self.skipped = 0

    def step(self):
        grads = {}
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                self.skipped += 1
                return False
            grads[k] = g
        self.t += 1
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            self.vhat[k] = np.maximum(self.vhat[k], self.v[k])
            if self.bias_correction:
                m_hat = self.m[k] / (1 - self.beta1 ** self.t)
                v_hat = self.vhat[k] / (1 - self.beta2 ** self.t)
            else:
                m_hat = self.m[k]
                v_hat = self.vhat[k]
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return True

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_blocks(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.asarray([self.t, self.skipped], dtype=np.float64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
            out[f"{prefix}.vhat.{k}"] = self.vhat[k]
        return out

    def load_state_blocks(self, prefix: str, blocks: dict[str, np.ndarray]):
        meta = blocks[f"{prefix}.t"]
        self.t = int(meta[0])
        self.skipped = int(meta[1])
        for k in self.params:
            self.m[k] = blocks[f"{prefix}.m.{k}"].copy()
            self.v[k] = blocks[f"{prefix}.v.{k}"].copy()
            self.vhat[k] = blocks[f"{prefix}.vhat.{k}"].copy()


def amsgrad_step(opt: AMSGrad) -> bool:
    """Apply one optimizer step from the accumulated .grad buffers;
    returns False when skipped on non-finite gradients."""
    return opt.step()


@dataclass
class StepLosses:
    gan_d: float
    gan_g: float
    gp: float
    rec: float
    perc: float
    tex: float
    total: float

    def as_dict(self) -> dict:
        return {"gan_d": self.gan_d, "gan_g": self.gan_g, "gp": self.gp,
                "rec": self.rec, "perc": self.perc, "tex": self.tex,
                "total": self.total}


def _batch_arrays(records, indices):
    imgs = np.stack([records[i].image.values for i in indices])[:, None]
    known = []
    for i in indices:
        r = records[i]
        union = np.zeros_like(r.image.values, dtype=np.uint8)
        for lm in r.lesions:
            union |= lm.bits
        known.append(1.0 - union.astype(np.float32))
    return imgs.astype(np.float32), np.stack(known)[:, None].astype(np.float32)


def train_step(gen: pcgan.GeneratorNet, disc: pcgan.DiscriminatorNet,
               records, indices, weights: LossWeights,
               opt_g: AMSGrad, opt_d: AMSGrad,
               extractor: FeatureExtractor, rng: np.random.Generator) -> StepLosses:
    """One critic update then one generator update on the same batch.

    Training masks come from the ground-truth lesion delineations; the
    critic sees 64x64 lesion-centered patches of the real image and the
    composite, cropped at identical coordinates.
    """
    imgs, known = _batch_arrays(records, indices)
    x = nn.Tensor(imgs)

    x_hat = gen.forward(x, known, training=True)
    z = composite_image(x, x_hat, known)

    patch = disc.config.patch
    real_patches = []
    fake_slices = []
    for bi, ri in enumerate(indices):
        r = records[ri]
        pi, pm, (r0, c0), _ = pcgan.crop_lesion_patch(
            imgs[bi, 0], r.lesions, rng, patch=patch,
            mask_patch=disc.config.mask_patches)
        real_patches.append(pi[None])
        fake_slices.append((bi, r0, c0, pm))
    real_batch = nn.Tensor(np.stack(real_patches))

    def fake_patch_tensor(source: nn.Tensor) -> nn.Tensor:
        rowsz = []
        for bi, r0, c0, pm in fake_slices:
            item = nn.narrow(source, 0, bi, 1)
            item = nn.narrow(item, 2, r0, patch)
            item = nn.narrow(item, 3, c0, patch)
            if disc.config.mask_patches:
                item = nn.mul(item, nn.Tensor(pm[None, None].astype(np.float32)))
            rowsz.append(item)
        out = rowsz[0]
        for piece in rowsz[1:]:
            out = nn.concat(out, piece, axis=0)
        return out

    # critic step on detached generator output
    disc.refresh_spectral_norm(power_iters=1)
    z_detached = nn.Tensor(z.data)
    fake_for_d = fake_patch_tensor(z_detached)
    loss_d, _, gp = wgan_losses(disc.forward, real_batch, fake_for_d,
                                lambda_gp=weights.gradient_penalty, rng=rng)
    if not np.isfinite(loss_d.data).all():
        raise NumericAbort("critic loss is non-finite")
    opt_d.zero_grad()
    loss_d.backward()
    amsgrad_step(opt_d)
    opt_d.zero_grad()

    # generator step (critic frozen: its grads are dropped below)
    fake_for_g = fake_patch_tensor(z)
    score_fake = disc.forward(fake_for_g)
    gan_g = nn.neg(nn.tmean(score_fake))
    rec = reconstruction_loss(x, x_hat, known, weights.valid, weights.hole)
    perc = perceptual_loss(x, x_hat, z, extractor)
    tex = texture_loss(x, x_hat, z, extractor)
    total = total_loss(LossParts(gan_g=gan_g, rec=rec, perc=perc, tex=tex), weights)
    if not np.isfinite(total.data).all():
        raise NumericAbort("generator total loss is non-finite")
    opt_g.zero_grad()
    opt_d.zero_grad()
    total.backward()
    amsgrad_step(opt_g)
    opt_g.zero_grad()
    opt_d.zero_grad()

    return StepLosses(
        gan_d=float(loss_d.data), gan_g=float(gan_g.data), gp=float(gp.data),
        rec=float(rec.data), perc=float(perc.data), tex=float(tex.data),
        total=float(total.data),
    )


def batch_indices(seed: int, n: int, batch: int, step: int) -> list[int]:
    """Batch for a given step under seeded epoch shuffling.

    A pure function of (seed, n, batch, step): each epoch's permutation is
    derived from (seed, epoch), so a resumed run consumes exactly the same
    batches as an uninterrupted one.
    """
    out: list[int] = []
    pos = (step - 1) * batch
    while len(out) < batch:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng((seed, epoch)).permutation(n)
        take = min(batch - len(out), n - off)
        out.extend(int(i) for i in perm[off:off + take])
        pos += take
    return out


def _format_row(step: int, losses: StepLosses, wall_ms: float) -> str:
    vals = [f"{step}"]
    for key in TELEMETRY_COLUMNS[1:-1]:
        vals.append(f"{losses.as_dict()[key]:.6e}")
    vals.append(f"{wall_ms:.3f}")
    return ",".join(vals)


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"checkpoint_{step:07d}.lfgc"


def save_training_checkpoint(path, gen, disc, opt_g, opt_d, step, rng,
                             config: TrainConfig):
    extra = {
        "step": step,
        "rng_state": json.dumps(rng.bit_generator.state),
        "train_config": vars(config),
    }
    blocks = {}
    blocks.update(opt_g.state_blocks("opt_g"))
    blocks.update(opt_d.state_blocks("opt_d"))
    pcgan.save_checkpoint(path, gen, disc, extra_config=extra, extra_blocks=blocks)


def load_training_checkpoint(path, gen, disc, opt_g, opt_d):
    """Restore in-place; returns (step, rng)."""
    cfg, blocks = container.read_blocks(path, pcgan.MAGIC_CHECKPOINT)
    for name, p in gen.parameters().items():
        p.data = blocks[f"g.{name}"].copy()
    gen.load_state_arrays({k[2:]: v for k, v in blocks.items()
                           if k.startswith("g.") and "running_" in k})
    for name, p in disc.parameters().items():
        p.data = blocks[f"d.{name}"].copy()
    disc.load_state_arrays({k[2:]: v for k, v in blocks.items()
                            if k.startswith("d.") and ".sn." in k})
    opt_g.load_state_blocks("opt_g", blocks)
    opt_d.load_state_blocks("opt_d", blocks)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(cfg["rng_state"])
    return int(cfg["step"]), rng


def train_loop(config: TrainConfig, records, gen: pcgan.GeneratorNet,
               disc: pcgan.DiscriminatorNet, extractor: FeatureExtractor,
               weights: LossWeights, out_dir, resume_from=None) -> Path:
    """Run the synthesis training; returns the telemetry CSV path."""
    usable = [r for r in records if r.has_lesion]
    if not usable:
        raise DataError("training set has no lesion-bearing slices")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    opt_g = AMSGrad(gen.parameters(), config.lr_g, config.beta1, config.beta2,
                    config.eps, config.bias_correction)
    opt_d = AMSGrad(disc.parameters(), config.lr_d, config.beta1, config.beta2,
                    config.eps, config.bias_correction)

    telemetry = out_dir / "telemetry.csv"
    if resume_from is not None:
        start_step, rng = load_training_checkpoint(resume_from, gen, disc, opt_g, opt_d)
        if not telemetry.exists():
            telemetry.write_text(",".join(TELEMETRY_COLUMNS) + "\n")
    else:
        start_step = 0
        rng = np.random.default_rng(config.seed)
        telemetry.write_text(",".join(TELEMETRY_COLUMNS) + "\n")
        save_training_checkpoint(_checkpoint_path(out_dir, 0), gen, disc,
                                 opt_g, opt_d, 0, rng, config)

    t_start = time.monotonic()
    with open(telemetry, "a") as tf:
        for step in range(start_step + 1, config.iterations + 1):
            t0 = time.monotonic()
            indices = batch_indices(config.seed, len(usable), config.batch, step)
            losses = train_step(gen, disc, usable, indices, weights,
                                opt_g, opt_d, extractor, rng)
            wall = (time.monotonic() - t0) * 1000.0
            row_wall = 0.0 if config.deterministic_outputs else wall
            tf.write(_format_row(step, losses, row_wall) + "\n")
            if step % 200 == 0:
                elapsed = time.monotonic() - t_start
                print(f"[train] step {step}/{config.iterations} "
                      f"total={losses.total:.4f} ({elapsed:.0f}s elapsed)",
                      file=sys.stderr)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_training_checkpoint(_checkpoint_path(out_dir, step), gen, disc,
                                         opt_g, opt_d, step, rng, config)
    final = _checkpoint_path(out_dir, config.iterations)
    if not final.exists():
        save_training_checkpoint(final, gen, disc, opt_g, opt_d,
                                 config.iterations, rng, config)
    return telemetry
