"""Pipeline configuration: a flat key=value file with sections, validated
into dataclasses before any stage runs. The resolved configuration is
echoed into the output directory for provenance. The only environment
override is LFG_SEED (global seed).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .imageio import PhantomConfig
from .losses import LossWeights
from .pcgan import DiscriminatorConfig, GeneratorConfig
from .radiomics import RadiomicsConfig
from .segeval import SegConfig
from .train import TrainConfig


@dataclass
class ShapeConfig:
    modes: int = 10
    sigma_clip: float = 3.0
    masks_per_slice: int = 1
    size_lo: float | None = None   # pixel areas; default: pool 10th percentile
    size_hi: float | None = None   # default: pool 90th percentile

    def __post_init__(self):
        if self.modes < 1 or self.masks_per_slice < 1:
            raise ConfigError("shape model needs modes >= 1 and masks_per_slice >= 1")


@dataclass
class ExtractorConfig:
    kind: str = "random-pyramid"
    seed: int = 1234
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("identity", "random-pyramid", "external-weights"):
            raise ConfigError(f"extractor.kind: unknown kind {self.kind!r}")


@dataclass
class PipelineConfig:
    seed: int = 7
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(
        input_hw=(64, 64), stages=6, base_channels=16, max_channels=128))
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    radiomics: RadiomicsConfig = field(default_factory=RadiomicsConfig)
    segmenter: SegConfig = field(default_factory=SegConfig)

    def deviation_log(self) -> list[str]:
        """Knobs that deviate from the published settings, echoed with the
        config for provenance."""
        notes = [f"loss.{d}" for d in self.loss.deviations()]
        if self.discriminator.mask_patches:
            notes.append("discriminator.mask_patches=True "
                         "(critic scores the lesion-interior region)")
        if self.generator.swap_activations:
            notes.append("generator.swap_activations=True")
        if not self.train.bias_correction:
            notes.append("train.bias_correction=False")
        return notes


_SECTIONS = {
    "run": None,
    "phantom": ("phantom", PhantomConfig),
    "shape": ("shape", ShapeConfig),
    "generator": ("generator", GeneratorConfig),
    "discriminator": ("discriminator", DiscriminatorConfig),
    "loss": ("loss", LossWeights),
    "extractor": ("extractor", ExtractorConfig),
    "train": ("train", TrainConfig),
    "radiomics": ("radiomics", RadiomicsConfig),
    "segmenter": ("segmenter", SegConfig),
}


def _parse_value(raw: str, annotation, section: str, key: str):
    raw = raw.strip()
    try:
        if annotation in (int, "int"):
            return int(raw)
        if annotation in (float, "float") or str(annotation) in ("float | None", "typing.Optional[float]"):
            return float(raw)
        if annotation in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation in (str, "str"):
            return raw
        if "tuple" in str(annotation):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            if all(p.strip().lstrip("-").isdigit() for p in parts):
                return tuple(int(p) for p in parts)
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                return tuple(p.strip().lower() in ("1", "true", "yes", "on") for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Build the pipeline configuration from an optional INI file plus
    CLI overrides of the form {'section.key': value}. Diagnostics name the
    offending section and key."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            if section == "run":
                for key, raw in parser.items(section):
                    if key == "seed":
                        cfg.seed = int(raw)
                    else:
                        raise ConfigError(f"[run] {key}: unknown key")
                continue
            attr, cls = _SECTIONS[section]
            spec = {f.name: f for f in fields(cls)}
            current = vars(getattr(cfg, attr)).copy()
            for key, raw in parser.items(section):
                if key not in spec:
                    raise ConfigError(f"[{section}] {key}: unknown key "
                                      f"(valid: {', '.join(sorted(spec))})")
                current[key] = _parse_value(raw, spec[key].type, section, key)
            try:
                setattr(cfg, attr, cls(**current))
            except (TypeError, ConfigError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc

    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section == "run" and key == "seed":
            cfg.seed = int(value)
            continue
        if section not in _SECTIONS or _SECTIONS[section] is None:
            raise ConfigError(f"override {dotted}: unknown section")
        attr, cls = _SECTIONS[section]
        spec = {f.name: f for f in fields(cls)}
        if key not in spec:
            raise ConfigError(f"override {dotted}: unknown key")
        current = vars(getattr(cfg, attr)).copy()
        current[key] = value
        setattr(cfg, attr, cls(**current))

    env_seed = os.environ.get("LFG_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LFG_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def echo_config(cfg: PipelineConfig, out_dir) -> Path:
    """Write the fully resolved configuration (and deviation notes) before
    any stage output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for section, mapping in _SECTIONS.items():
        if mapping is None:
            continue
        attr, _ = mapping
        lines.append(f"[{section}]")
        for key, value in vars(getattr(cfg, attr)).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    notes = cfg.deviation_log()
    if notes:
        lines.append("# deviations from published settings:")
        lines.extend(f"#   {n}" for n in notes)
        lines.append("")
    path = out_dir / "config.echo.ini"
    path.write_text("\n".join(lines))
    return path
