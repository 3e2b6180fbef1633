"""Generator and critic assembled from the layer set.

The generator is U-shaped and built entirely from partial convolutions:
each encoder stage halves the spatial dims (stride 2) while the mask is
updated alongside; each decoder stage upsamples, concatenates the encoder
features and masks of the matching resolution, and applies a stride-1
partial convolution. Batch normalization is absent on the first and last
layers. The encoder uses ReLU and the decoder LeakyReLU(0.2) by default;
`swap_activations` flips them.

The critic scores a 64x64 single-channel patch through 4 conv layers
(first three: kernel 4, stride 2, padding 1) with spectral normalization
on the non-final layers, ending in an unbounded scalar per item (no
sigmoid). By convention the patch holds the lesion-interior region: the
crop is multiplied by the lesion indicator, because the critic judges
lesion texture realism. `mask_patches=False` disables that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container, nn
from .errors import ConfigError, DataError

MAGIC_CHECKPOINT = b"LFGC"


@dataclass
class InitSpec:
    """He fan-in normal kernels, zero biases, deterministic per seed."""

    seed: int = 0
    scheme: str = "he_normal"

    def __post_init__(self):
        if self.scheme != "he_normal":
            raise ConfigError(f"unknown init scheme: {self.scheme}")


def he_conv_weight(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    fan_in = cin * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw)).astype(np.float32)


# ----------------------------------------------------------------------
# generator
# ----------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    input_hw: tuple[int, int] = (256, 256)
    stages: int = 8
    base_channels: int = 64
    max_channels: int = 512
    in_channels: int = 1
    out_channels: int = 1
    first_kernel: int = 5
    kernel: int = 3
    slope: float = 0.2
    swap_activations: bool = False

    def stage_channels(self, i: int) -> int:
        return min(self.base_channels * (2 ** i), self.max_channels)

    def encoder_activation(self) -> str:
        return "leaky_relu" if self.swap_activations else "relu"

    def decoder_activation(self) -> str:
        return "relu" if self.swap_activations else "leaky_relu"


@dataclass
class PConvLayer:
    params: nn.ConvParams
    bn: nn.BatchNorm2d | None
    act: str
    slope: float = 0.2

    def __call__(self, x: nn.Tensor, m: np.ndarray, training: bool):
        out, m_new = nn.partial_conv2d(x, m, self.params)
        if self.bn is not None:
            out = self.bn(out, training)
        return nn.activation(out, self.act, self.slope), m_new


class GeneratorNet:
    def __init__(self, config: GeneratorConfig, enc: list[PConvLayer], dec: list[PConvLayer]):
        self.config = config
        self.enc = enc
        self.dec = dec

    def forward(self, image, mask: np.ndarray, training: bool = False) -> nn.Tensor:
        """Inpaint: image (B,1,H,W) with hole pixels pre-zeroed (re-zeroed
        here), mask (B,1,H,W) with 1 on known pixels."""
        x = nn.as_tensor(image)
        nn.check_mask(mask)
        if x.shape[2:] != mask.shape[2:] or x.shape[0] != mask.shape[0]:
            raise DataError("image and mask dims must match")
        h, w = x.shape[2:]
        eh, ew = self.config.input_hw
        if (h, w) != (eh, ew):
            raise DataError(f"generator built for {eh}x{ew}, got {h}x{w}")
        m = mask.astype(np.float32)
        x = nn.mul(x, nn.Tensor(m.astype(x.dtype)))

        skips = [(x, m)]
        for layer in self.enc:
            x, m = layer(x, m, training)
            skips.append((x, m))

        d, dm = skips[-1]
        for j, layer in enumerate(self.dec):
            d = nn.upsample2x(d)
            dm = nn.upsample2x_mask(dm)
            skip_x, skip_m = skips[len(self.enc) - 1 - j]
            cat = nn.concat_channels(d, skip_x)
            groups = [(dm, d.shape[1]), (skip_m, skip_x.shape[1])]
            d, dm = layer(cat, groups, training)
        return d

    def parameters(self) -> dict[str, nn.Tensor]:
        out = {}
        for tag, layers in (("enc", self.enc), ("dec", self.dec)):
            for i, layer in enumerate(layers):
                out[f"{tag}{i}.weight"] = layer.params.weight
                out[f"{tag}{i}.bias"] = layer.params.bias
                if layer.bn is not None:
                    out[f"{tag}{i}.bn.gamma"] = layer.bn.gamma
                    out[f"{tag}{i}.bn.beta"] = layer.bn.beta
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, layers in (("enc", self.enc), ("dec", self.dec)):
            for i, layer in enumerate(layers):
                if layer.bn is not None:
                    out[f"{tag}{i}.bn.running_mean"] = layer.bn.running_mean
                    out[f"{tag}{i}.bn.running_var"] = layer.bn.running_var
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]):
        for tag, layers in (("enc", self.enc), ("dec", self.dec)):
            for i, layer in enumerate(layers):
                if layer.bn is not None:
                    layer.bn.running_mean = blocks[f"{tag}{i}.bn.running_mean"].copy()
                    layer.bn.running_var = blocks[f"{tag}{i}.bn.running_var"].copy()


def build_generator(config: GeneratorConfig, init: InitSpec) -> GeneratorNet:
    h, w = config.input_hw
    if config.stages < 2:
        raise ConfigError("generator needs at least 2 stages")
    if h % (2 ** config.stages) or w % (2 ** config.stages):
        raise ConfigError(
            f"input dims {h}x{w} must be divisible by 2^stages = {2 ** config.stages}")
    rng = np.random.default_rng(init.seed)

    enc = []
    cin = config.in_channels
    for i in range(config.stages):
        cout = config.stage_channels(i)
        k = config.first_kernel if i == 0 else config.kernel
        weight = nn.Tensor(he_conv_weight(rng, cout, cin, k, k), requires_grad=True)
        bias = nn.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        params = nn.ConvParams(weight, bias, stride=2, padding=(k - 1) // 2)
        bn = nn.BatchNorm2d(cout) if i > 0 else None
        enc.append(PConvLayer(params, bn, config.encoder_activation(), config.slope))
        cin = cout

    dec = []
    for j in range(config.stages):
        stage = config.stages - 1 - j  # resolution of the skip source
        skip_ch = config.stage_channels(stage - 1) if stage >= 1 else config.in_channels
        cout = config.stage_channels(stage - 1) if stage >= 1 else config.out_channels
        k = config.kernel
        weight = nn.Tensor(he_conv_weight(rng, cout, cin + skip_ch, k, k), requires_grad=True)
        bias = nn.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        params = nn.ConvParams(weight, bias, stride=1, padding=(k - 1) // 2)
        last = j == config.stages - 1
        bn = None if last else nn.BatchNorm2d(cout)
        act = "none" if last else config.decoder_activation()
        dec.append(PConvLayer(params, bn, act, config.slope))
        cin = cout
    return GeneratorNet(config, enc, dec)


def generator_forward(g: GeneratorNet, image, mask, training: bool = False) -> nn.Tensor:
    return g.forward(image, mask, training=training)


# ----------------------------------------------------------------------
# spectral normalization
# ----------------------------------------------------------------------

@dataclass
class SpectralState:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def for_weight(cls, weight: np.ndarray, rng: np.random.Generator):
        cout = weight.shape[0]
        rest = int(np.prod(weight.shape[1:]))
        u = rng.normal(size=cout)
        v = rng.normal(size=rest)
        return cls(u=(u / np.linalg.norm(u)).astype(np.float32),
                   v=(v / np.linalg.norm(v)).astype(np.float32))


def _l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / max(float(np.linalg.norm(x)), eps)


def spectral_normalize(weight: nn.Tensor, state: SpectralState,
                       power_iters: int = 1) -> nn.Tensor:
    """Divide the kernel (viewed out-channels x rest) by its power-iteration
    estimate of the top singular value; `state` is updated in place."""
    cout = weight.shape[0]
    w2d_data = weight.data.reshape(cout, -1)
    for _ in range(power_iters):
        state.v = _l2_normalize(w2d_data.T @ state.u).astype(np.float32)
        state.u = _l2_normalize(w2d_data @ state.v).astype(np.float32)
    sigma_val = float(state.u @ w2d_data @ state.v)
    if abs(sigma_val) < 1e-12:
        return nn.mul(weight, nn.Tensor(np.asarray(1.0 / 1e-12, dtype=weight.dtype)))
    w2d = nn.reshape(weight, (cout, w2d_data.shape[1]))
    ut = nn.Tensor(state.u.reshape(1, cout).astype(weight.dtype))
    vt = nn.Tensor(state.v.reshape(-1, 1).astype(weight.dtype))
    sigma = nn.reshape(nn.matmul(nn.matmul(ut, w2d), vt), (1, 1, 1, 1))
    return nn.mul(weight, nn.pow_const(sigma, -1.0))


def estimate_sigma(weight: np.ndarray, state: SpectralState) -> float:
    w2d = weight.reshape(weight.shape[0], -1)
    return float(state.u @ w2d @ state.v)


# ----------------------------------------------------------------------
# discriminator
# ----------------------------------------------------------------------

@dataclass
class DiscriminatorConfig:
    patch: int = 64
    in_channels: int = 1
    base_channels: int = 32
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    spectral_norm: tuple = (True, True, True, False)
    activation: str = "leaky_relu"
    slope: float = 0.2
    mask_patches: bool = True


class DiscriminatorNet:
    def __init__(self, config: DiscriminatorConfig, layers: list[nn.ConvParams],
                 sn_states: list[SpectralState | None]):
        self.config = config
        self.layers = layers
        self.sn_states = sn_states

    def refresh_spectral_norm(self, power_iters: int = 1):
        """One power-iteration step per normalized layer; call once per
        training step so every forward in the step sees the same weights."""
        for params, state in zip(self.layers, self.sn_states):
            if state is not None:
                spectral_normalize(params.weight, state, power_iters=power_iters)

    def forward(self, patch) -> nn.Tensor:
        x = nn.as_tensor(patch)
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[2:] != (c.patch, c.patch):
            raise DataError(f"critic expects (B,{c.in_channels},{c.patch},{c.patch}) patches, got {x.shape}")
        for i, (params, state) in enumerate(zip(self.layers, self.sn_states)):
            w = spectral_normalize(params.weight, state, power_iters=0) if state is not None else None
            x = nn.conv2d(x, params, weight=w)
            if i < len(self.layers) - 1:
                x = nn.activation(x, c.activation, c.slope)
        return nn.reshape(nn.tmean(x, axis=(1, 2, 3)), (x.shape[0],))

    __call__ = forward

    def parameters(self) -> dict[str, nn.Tensor]:
        out = {}
        for i, params in enumerate(self.layers):
            out[f"d{i}.weight"] = params.weight
            out[f"d{i}.bias"] = params.bias
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, state in enumerate(self.sn_states):
            if state is not None:
                out[f"d{i}.sn.u"] = state.u
                out[f"d{i}.sn.v"] = state.v
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]):
        for i, state in enumerate(self.sn_states):
            if state is not None:
                state.u = blocks[f"d{i}.sn.u"].copy()
                state.v = blocks[f"d{i}.sn.v"].copy()


def build_discriminator(config: DiscriminatorConfig, init: InitSpec) -> DiscriminatorNet:
    if config.patch % 8:
        raise ConfigError("critic patch size must be divisible by 8")
    rng = np.random.default_rng(init.seed)
    chans = [config.in_channels, config.base_channels,
             config.base_channels * 2, config.base_channels * 4]
    layers = []
    for i in range(3):
        w = nn.Tensor(he_conv_weight(rng, chans[i + 1], chans[i], config.kernel, config.kernel),
                      requires_grad=True)
        b = nn.Tensor(np.zeros(chans[i + 1], dtype=np.float32), requires_grad=True)
        layers.append(nn.ConvParams(w, b, stride=config.stride, padding=config.padding))
    final_k = config.patch // 8  # full-field kernel over the remaining map
    w = nn.Tensor(he_conv_weight(rng, 1, chans[3], final_k, final_k), requires_grad=True)
    b = nn.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    layers.append(nn.ConvParams(w, b, stride=1, padding=0))

    sn_states = [SpectralState.for_weight(p.weight.data, rng) if flag else None
                 for p, flag in zip(layers, config.spectral_norm)]
    return DiscriminatorNet(config, layers, sn_states)


def discriminator_forward(d: DiscriminatorNet, patch) -> nn.Tensor:
    return d.forward(patch)


# ----------------------------------------------------------------------
# lesion patch cropping
# ----------------------------------------------------------------------

def crop_lesion_patch(image: np.ndarray, lesions, rng: np.random.Generator,
                      patch: int = 64, mask_patch: bool = True):
    """Crop a patch x patch window centered on one randomly chosen lesion's
    bounding box (clipped to stay in bounds). Returns
    (patch_image, patch_mask, (r0, c0), lesion_index); the image is
    multiplied by the lesion indicator when mask_patch is set."""
    if not lesions:
        raise DataError("no lesion present to crop")
    image = np.asarray(image)
    h, w = image.shape
    if h < patch or w < patch:
        raise DataError(f"image {h}x{w} smaller than patch {patch}")
    idx = int(rng.integers(0, len(lesions)))
    bits = lesions[idx].bits if hasattr(lesions[idx], "bits") else np.asarray(lesions[idx])
    rows, cols = np.nonzero(bits)
    if rows.size == 0:
        raise DataError("chosen lesion mask is empty")
    cr = (int(rows.min()) + int(rows.max()) + 1) // 2
    cc = (int(cols.min()) + int(cols.max()) + 1) // 2
    r0 = int(np.clip(cr - patch // 2, 0, h - patch))
    c0 = int(np.clip(cc - patch // 2, 0, w - patch))
    pm = bits[r0:r0 + patch, c0:c0 + patch].astype(np.float32)
    pi = image[r0:r0 + patch, c0:c0 + patch].astype(np.float32)
    if mask_patch:
        pi = pi * pm
    return pi, pm, (r0, c0), idx


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------

def checkpoint_blocks(gen: GeneratorNet, disc: DiscriminatorNet | None) -> dict[str, np.ndarray]:
    blocks = {}
    for name, p in gen.parameters().items():
        blocks[f"g.{name}"] = p.data
    for name, arr in gen.state_arrays().items():
        blocks[f"g.{name}"] = arr
    if disc is not None:
        for name, p in disc.parameters().items():
            blocks[f"d.{name}"] = p.data
        for name, arr in disc.state_arrays().items():
            blocks[f"d.{name}"] = arr
    return blocks


def save_checkpoint(path, gen: GeneratorNet, disc: DiscriminatorNet | None,
                    extra_config: dict | None = None,
                    extra_blocks: dict[str, np.ndarray] | None = None):
    cfg = {
        "generator": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in vars(gen.config).items()},
        "discriminator": ({k: list(v) if isinstance(v, tuple) else v
                           for k, v in vars(disc.config).items()} if disc else None),
    }
    if extra_config:
        cfg.update(extra_config)
    blocks = checkpoint_blocks(gen, disc)
    if extra_blocks:
        blocks.update(extra_blocks)
    container.write_blocks(path, MAGIC_CHECKPOINT, cfg, blocks)


def load_checkpoint(path):
    """Rebuild the generator (and critic when present) from a checkpoint.
    Returns (gen, disc_or_None, config_dict, blocks)."""
    cfg, blocks = container.read_blocks(path, MAGIC_CHECKPOINT)
    gcfg_raw = dict(cfg["generator"])
    gcfg_raw["input_hw"] = tuple(gcfg_raw["input_hw"])
    gcfg = GeneratorConfig(**gcfg_raw)
    gen = build_generator(gcfg, InitSpec(seed=0))
    for name, p in gen.parameters().items():
        p.data = blocks[f"g.{name}"].copy()
    gen.load_state_arrays({k[2:]: v for k, v in blocks.items()
                           if k.startswith("g.") and "running_" in k})

    disc = None
    if cfg.get("discriminator"):
        dcfg_raw = dict(cfg["discriminator"])
        dcfg_raw["spectral_norm"] = tuple(dcfg_raw["spectral_norm"])
        dcfg = DiscriminatorConfig(**dcfg_raw)
        disc = build_discriminator(dcfg, InitSpec(seed=0))
        for name, p in disc.parameters().items():
            p.data = blocks[f"d.{name}"].copy()
        disc.load_state_arrays({k[2:]: v for k, v in blocks.items()
                                if k.startswith("d.") and ".sn." in k})
    return gen, disc, cfg, blocks
