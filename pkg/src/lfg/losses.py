"""Training objectives for synthesis and segmentation.

The synthesis total is a weighted sum of four parts: a Wasserstein critic
term, a mask-weighted L1 reconstruction term, a perceptual term over the
stages of a fixed feature extractor, and a texture term over Gram matrices
of those stages. All L1 norms are normalized by element count (means) so
the published weight magnitudes carry across resolutions. Segmentation
trains on cross-entropy plus smoothed Dice.

The feature extractor is pluggable: `identity` (the image itself, handy
for closed-form oracles), `random-pyramid` (a fixed-seed 3-stage strided
conv stack; the default, no pretrained weights needed), or
`external-weights` loaded from a block container for users who supply
pretrained stage parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import container, nn
from .errors import ConfigError, DataError, NumericAbort

MAGIC_EXTRACTOR = b"LFGX"


@dataclass
class LossWeights:
    reconstruction: float = 1.0
    perceptual: float = 0.05
    texture: float = 100.0
    valid: float = 1.0        # L1 weight on known (healthy) pixels
    hole: float = 5.0         # L1 weight on hole (lesion) pixels
    gradient_penalty: float = 10.0
    ce: float = 0.5
    dice: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")

    def deviations(self) -> list[str]:
        """Fields that differ from the published defaults."""
        ref = LossWeights.__new__(LossWeights)
        out = []
        for f in fields(self):
            if getattr(self, f.name) != f.default:
                out.append(f"{f.name}={getattr(self, f.name)} (default {f.default})")
        return out


# ----------------------------------------------------------------------
# feature extractor
# ----------------------------------------------------------------------

@dataclass
class ExtractorStage:
    params: nn.ConvParams
    slope: float = 0.2


@dataclass
class FeatureExtractor:
    kind: str
    stages_params: list[ExtractorStage] = field(default_factory=list)

    def stages(self, x: nn.Tensor) -> list[nn.Tensor]:
        """Feature map per stage for a (B, 1, H, W) image tensor."""
        if self.kind == "identity":
            return [nn.as_tensor(x)]
        feats = []
        h = nn.as_tensor(x)
        for st in self.stages_params:
            h = nn.leaky_relu(nn.conv2d(h, st.params), st.slope)
            feats.append(h)
        return feats

    def stage_dims(self, hw) -> list[tuple]:
        h, w = hw
        if self.kind == "identity":
            return [(1, h, w)]
        dims = []
        c = 1
        for st in self.stages_params:
            kh, kw = st.params.kernel
            h, w = nn.conv_out_hw(h, w, kh, kw, st.params.stride, st.params.padding)
            c = st.params.out_channels
            dims.append((c, h, w))
        return dims


def identity_extractor() -> FeatureExtractor:
    return FeatureExtractor(kind="identity")


def random_pyramid_extractor(seed: int = 1234, channels=(8, 16, 32),
                             in_channels: int = 1) -> FeatureExtractor:
    """Fixed, non-trained strided conv pyramid with leaky activations."""
    rng = np.random.default_rng(seed)
    stages = []
    cin = in_channels
    for cout in channels:
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3)).astype(np.float32)
        b = np.zeros(cout, dtype=np.float32)
        stages.append(ExtractorStage(nn.ConvParams(nn.Tensor(w), nn.Tensor(b), stride=2, padding=1)))
        cin = cout
    return FeatureExtractor(kind="random-pyramid", stages_params=stages)


def save_extractor(path, extractor: FeatureExtractor):
    blocks = {}
    meta = {"kind": "external-weights", "stages": []}
    for i, st in enumerate(extractor.stages_params):
        blocks[f"stage{i}.weight"] = st.params.weight.data
        blocks[f"stage{i}.bias"] = st.params.bias.data
        meta["stages"].append({"stride": st.params.stride, "padding": st.params.padding,
                               "slope": st.slope})
    container.write_blocks(path, MAGIC_EXTRACTOR, meta, blocks)


def load_extractor(path) -> FeatureExtractor:
    meta, blocks = container.read_blocks(path, MAGIC_EXTRACTOR)
    stages = []
    for i, st in enumerate(meta["stages"]):
        w = nn.Tensor(blocks[f"stage{i}.weight"])
        b = nn.Tensor(blocks[f"stage{i}.bias"])
        stages.append(ExtractorStage(nn.ConvParams(w, b, st["stride"], st["padding"]),
                                     slope=st["slope"]))
    return FeatureExtractor(kind="external-weights", stages_params=stages)


def make_extractor(kind: str, seed: int = 1234, path=None) -> FeatureExtractor:
    if kind == "identity":
        return identity_extractor()
    if kind == "random-pyramid":
        return random_pyramid_extractor(seed=seed)
    if kind == "external-weights":
        if path is None:
            raise ConfigError("external-weights extractor needs a weights file")
        return load_extractor(path)
    raise ConfigError(f"unknown extractor kind: {kind}")


# ----------------------------------------------------------------------
# synthesis losses
# ----------------------------------------------------------------------

def _mean_abs(t: nn.Tensor) -> nn.Tensor:
    sign = np.sign(t.data).astype(t.dtype)
    return nn.tmean(nn.mul(t, nn.Tensor(sign)))


def reconstruction_loss(x, x_hat, m, w_valid: float = 1.0, w_hole: float = 5.0) -> nn.Tensor:
    """Mask-weighted L1: w_valid on known pixels, w_hole on hole pixels,
    both normalized by the total pixel count."""
    x, x_hat = nn.as_tensor(x), nn.as_tensor(x_hat)
    m = np.asarray(m, dtype=x.dtype)
    nn.check_mask(m)
    diff = x - x_hat
    valid = _mean_abs(nn.mul(diff, nn.Tensor(m)))
    hole = _mean_abs(nn.mul(diff, nn.Tensor(1.0 - m)))
    w_v = nn.Tensor(np.asarray(w_valid, dtype=x.dtype))
    w_h = nn.Tensor(np.asarray(w_hole, dtype=x.dtype))
    return nn.add(nn.mul(valid, w_v), nn.mul(hole, w_h))


def composite_image(x, x_hat, m) -> nn.Tensor:
    """Known pixels from the real image, hole pixels from the prediction."""
    x, x_hat = nn.as_tensor(x), nn.as_tensor(x_hat)
    m = np.asarray(m, dtype=x.dtype)
    nn.check_mask(m)
    return nn.add(nn.mul(x, nn.Tensor(m)), nn.mul(x_hat, nn.Tensor(1.0 - m)))


def perceptual_loss(x, x_hat, z, extractor: FeatureExtractor) -> nn.Tensor:
    """Stage-wise L1 between features of the prediction/composite and the
    real image, each stage normalized by its element count."""
    fx = extractor.stages(nn.as_tensor(x))
    fh = extractor.stages(nn.as_tensor(x_hat))
    fz = extractor.stages(nn.as_tensor(z))
    total = None
    for a, b, c in zip(fx, fh, fz):
        term = nn.add(_mean_abs(b - a), _mean_abs(c - a))
        total = term if total is None else nn.add(total, term)
    return total


def gram_matrix(f: nn.Tensor) -> nn.Tensor:
    """(C, C) channel autocorrelation of one (C, H, W) stage, normalized
    by C*H*W."""
    if f.ndim != 3:
        raise DataError("gram_matrix expects a single (C, H, W) stage")
    c, h, w = f.shape
    flat = nn.reshape(f, (c, h * w))
    g = nn.matmul(flat, nn.transpose(flat, (1, 0)))
    return nn.mul(g, nn.Tensor(np.asarray(1.0 / (c * h * w), dtype=f.dtype)))


def _batch_gram(f: nn.Tensor) -> list[nn.Tensor]:
    return [gram_matrix(nn.reshape(nn.narrow(f, 0, i, 1), f.shape[1:]))
            for i in range(f.shape[0])]


def texture_loss(x, x_hat, z, extractor: FeatureExtractor) -> nn.Tensor:
    """Same structure as the perceptual term but over Gram matrices, so it
    compares channel correlations rather than positions. Normalized by the
    Gram element count per stage, averaged over the batch."""
    fx = extractor.stages(nn.as_tensor(x))
    fh = extractor.stages(nn.as_tensor(x_hat))
    fz = extractor.stages(nn.as_tensor(z))
    batch = fx[0].shape[0]
    total = None
    for a, b, c in zip(fx, fh, fz):
        ga, gb, gc = _batch_gram(a), _batch_gram(b), _batch_gram(c)
        for i in range(batch):
            term = nn.add(_mean_abs(gb[i] - ga[i]), _mean_abs(gc[i] - ga[i]))
            term = nn.mul(term, nn.Tensor(np.asarray(1.0 / batch, dtype=term.dtype)))
            total = term if total is None else nn.add(total, term)
    return total


def wgan_losses(critic, real_patch, fake_patch, lambda_gp: float = 10.0,
                rng: np.random.Generator | None = None):
    """Wasserstein critic objective with a gradient penalty.

    critic: callable mapping a (B, 1, H, W) tensor to (B,) scores.
    Returns (loss_d, loss_g, gp) where loss_d is minimized by the critic,
    loss_g by the generator, and gp drives the critic's input-gradient
    norm toward 1 at per-item random interpolates.
    """
    real = nn.as_tensor(real_patch)
    fake = nn.as_tensor(fake_patch)
    if real.shape != fake.shape:
        raise DataError("real and fake patches must share dims")
    rng = rng or np.random.default_rng(0)
    b = real.shape[0]

    score_real = critic(real)
    score_fake = critic(fake)
    mean_real = nn.tmean(score_real)
    mean_fake = nn.tmean(score_fake)

    eps = rng.uniform(0.0, 1.0, size=(b, 1, 1, 1)).astype(real.dtype)
    u = nn.Tensor(eps * real.data + (1.0 - eps) * fake.data, requires_grad=True)
    score_u = critic(u)
    grad_u = nn.grad(nn.tsum(score_u), [u], create_graph=True)[0]
    sq = nn.tsum(nn.mul(grad_u, grad_u), axis=(1, 2, 3))
    norms = nn.pow_const(sq, 0.5)
    ones = nn.Tensor(np.ones(b, dtype=real.dtype))
    gp = nn.tmean(nn.pow_const(norms - ones, 2.0))

    lam = nn.Tensor(np.asarray(lambda_gp, dtype=real.dtype))
    loss_d = nn.add(mean_fake - mean_real, nn.mul(lam, gp))
    loss_g = nn.neg(mean_fake)
    return loss_d, loss_g, gp


@dataclass
class LossParts:
    gan_g: nn.Tensor
    rec: nn.Tensor
    perc: nn.Tensor
    tex: nn.Tensor


def total_loss(parts: LossParts, weights: LossWeights) -> nn.Tensor:
    """Weighted generator objective; aborts on any non-finite part."""
    for name in ("gan_g", "rec", "perc", "tex"):
        val = getattr(parts, name)
        if not np.isfinite(val.data).all():
            raise NumericAbort(f"loss part {name} is non-finite")
    dt = parts.rec.dtype
    total = parts.gan_g
    total = nn.add(total, nn.mul(parts.rec, nn.Tensor(np.asarray(weights.reconstruction, dtype=dt))))
    total = nn.add(total, nn.mul(parts.perc, nn.Tensor(np.asarray(weights.perceptual, dtype=dt))))
    total = nn.add(total, nn.mul(parts.tex, nn.Tensor(np.asarray(weights.texture, dtype=dt))))
    return total


# ----------------------------------------------------------------------
# segmentation loss
# ----------------------------------------------------------------------

def ce_dice_loss(probs, target, w_ce: float = 0.5, w_dice: float = 1.0) -> nn.Tensor:
    """Binary cross-entropy (mean over pixels) plus smoothed Dice.

    `probs` must already lie in [0,1]; it is clamped to [1e-7, 1-1e-7]
    inside the CE term only. The +1 smoothing keeps the Dice term defined
    when both prediction and target are empty.
    """
    p = nn.as_tensor(probs)
    y = np.asarray(target, dtype=p.dtype)
    if p.shape != y.shape:
        raise DataError("prediction and target dims must match")
    if p.data.min() < 0 or p.data.max() > 1:
        raise DataError("probabilities must lie in [0,1]")
    yt = nn.Tensor(y)

    pc = nn.clip(p, 1e-7, 1.0 - 1e-7)
    ce_terms = nn.add(nn.mul(yt, nn.tlog(pc)),
                      nn.mul(nn.Tensor(1.0 - y), nn.tlog(1.0 - pc)))
    ce = nn.neg(nn.tmean(ce_terms))

    inter = nn.tsum(nn.mul(p, yt))
    denom = nn.add(nn.tsum(p), nn.Tensor(np.asarray(float(y.sum()) + 1.0, dtype=p.dtype)))
    one = nn.Tensor(np.asarray(1.0, dtype=p.dtype))
    two = nn.Tensor(np.asarray(2.0, dtype=p.dtype))
    dice = one - (nn.add(nn.mul(two, inter), one) / denom)

    return nn.add(nn.mul(ce, nn.Tensor(np.asarray(w_ce, dtype=p.dtype))),
                  nn.mul(dice, nn.Tensor(np.asarray(w_dice, dtype=p.dtype))))
