"""Gray-level co-occurrence texture features and histogram comparison.

Defaults follow common radiomics practice: 32 equal-width levels over
[0,1], the four distance-1 offsets (0,1),(1,1),(1,0),(1,-1), symmetric
accumulation pooled over offsets, and pairs counted only when both pixels
lie inside the lesion mask. Feature distributions of two lesion sets are
compared as 64-bin histograms over their joint value range via the
(asymmetric) Kullback-Leibler divergence with epsilon smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass
class RadiomicsConfig:
    levels: int = 32
    offsets: tuple = DEFAULT_OFFSETS
    symmetric: bool = True
    # 16 bins with ~one pseudo-count of smoothing keeps the divergence
    # estimate meaningful at desk-scale sample sizes (tens of lesions);
    # finer histograms drown the comparison in empty-bin noise
    bins: int = 16
    kl_eps: float = 1e-2
    min_pixels: int = 2


@dataclass
class GLCM:
    levels: int
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (self.levels, self.levels):
            raise DataError("co-occurrence matrix shape must be levels x levels")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise DataError("co-occurrence entries must be a probability distribution")
        self.probabilities = p


@dataclass
class FeatureHistogram:
    heights: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.size < 2:
            raise DataError("histogram needs at least 2 bins")
        if h.min() < 0 or abs(h.sum() - 1.0) > 1e-9:
            raise DataError("histogram heights must be normalized")
        self.heights = h

    @property
    def bins(self) -> int:
        return self.heights.size


def quantize(values: np.ndarray, mask: np.ndarray, levels: int = 32) -> np.ndarray:
    """Equal-width [0,1] binning to integer levels 0..levels-1 inside the
    mask; pixels outside the mask are set to -1."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if mask.sum() < 2:
        raise DataError("lesion mask covers fewer than 2 pixels")
    if values.min() < 0 or values.max() > 1:
        raise DataError("quantize expects intensities in [0,1]")
    lv = np.minimum((values * levels).astype(np.int64), levels - 1)
    out = np.where(mask, lv, -1)
    return out.astype(np.int64)


def compute_glcm(level_grid: np.ndarray, mask: np.ndarray,
                 offsets=DEFAULT_OFFSETS, symmetric: bool = True,
                 levels: int | None = None) -> GLCM:
    """Pair counts over all offsets (both pixels inside the mask),
    optionally symmetrized, normalized to probabilities."""
    lv = np.asarray(level_grid, dtype=np.int64)
    mask = np.asarray(mask).astype(bool)
    n_levels = int(levels if levels is not None else lv[mask].max() + 1)
    counts = np.zeros((n_levels, n_levels), dtype=np.float64)
    h, w = lv.shape
    for dr, dc in offsets:
        r0 = max(0, -dr)
        r1 = min(h, h - dr)
        c0 = max(0, -dc)
        c1 = min(w, w - dc)
        a = lv[r0:r1, c0:c1]
        b = lv[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        ok = mask[r0:r1, c0:c1] & mask[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        if not ok.any():
            continue
        np.add.at(counts, (a[ok], b[ok]), 1.0)
        if symmetric:
            np.add.at(counts, (b[ok], a[ok]), 1.0)
    total = counts.sum()
    if total == 0:
        raise DataError("no valid pixel pairs inside the mask")
    return GLCM(levels=n_levels, probabilities=counts / total)


def glcm_features(glcm: GLCM) -> tuple[float, float]:
    """(energy, correlation). Degenerate correlation (zero marginal
    spread) is defined as 1."""
    p = glcm.probabilities
    energy = float(np.sum(p * p))
    idx = np.arange(glcm.levels, dtype=np.float64)
    pi = p.sum(axis=1)
    pj = p.sum(axis=0)
    mu_i = float(idx @ pi)
    mu_j = float(idx @ pj)
    var_i = float(((idx - mu_i) ** 2) @ pi)
    var_j = float(((idx - mu_j) ** 2) @ pj)
    if var_i <= 0 or var_j <= 0:
        return energy, 1.0
    cov = float(((idx - mu_i)[:, None] * (idx - mu_j)[None, :] * p).sum())
    return energy, cov / np.sqrt(var_i * var_j)


def lesion_features(image_values: np.ndarray, lesion_mask: np.ndarray,
                    config: RadiomicsConfig | None = None):
    """(energy, correlation) of one lesion, or None when the region is too
    small or has no valid pixel pairs."""
    cfg = config or RadiomicsConfig()
    mask = np.asarray(lesion_mask).astype(bool)
    if mask.sum() < cfg.min_pixels:
        return None
    lv = quantize(image_values, mask, cfg.levels)
    try:
        glcm = compute_glcm(lv, mask, cfg.offsets, cfg.symmetric, levels=cfg.levels)
    except DataError:
        return None
    return glcm_features(glcm)


def feature_histogram(values, bins: int = 64, value_range=None) -> FeatureHistogram:
    """Normalized histogram; out-of-range values are clamped into the edge
    bins. The range defaults to the min..max of the values; pass the joint
    range when comparing two sets."""
    vals = np.asarray([v for v in np.asarray(values, dtype=np.float64).ravel()
                       if np.isfinite(v)])
    if vals.size == 0:
        raise DataError("cannot build a histogram from an empty value set")
    if bins < 2:
        raise ConfigError("histogram needs at least 2 bins")
    if value_range is None:
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
    if hi <= lo:
        hi = lo + 1e-12
    clamped = np.clip(vals, lo, hi)
    idx = np.minimum(((clamped - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return FeatureHistogram(heights=counts / counts.sum(), lo=lo, hi=hi)


def kl_divergence(h1: FeatureHistogram, h2: FeatureHistogram,
                  eps: float = 1e-8) -> float:
    """Sum of h1 * ln(h1/h2) after additive epsilon smoothing and
    renormalization of both histograms; zero-mass bins of h1 contribute 0."""
    if h1.bins != h2.bins or (h1.lo, h1.hi) != (h2.lo, h2.hi):
        raise DataError("histograms must share bin count and range")
    a = h1.heights + eps
    b = h2.heights + eps
    a = a / a.sum()
    b = b / b.sum()
    pos = (a > 0) & (b > 0)
    terms = np.zeros_like(a)
    terms[pos] = a[pos] * np.log(a[pos] / b[pos])
    return float(terms.sum())


@dataclass
class TextureComparison:
    feature: str
    real_histogram: FeatureHistogram
    synthetic_histogram: FeatureHistogram
    kl: float


def compare_feature_sets(real_values, synthetic_values, feature: str,
                         bins: int = 16, eps: float = 1e-2) -> TextureComparison:
    """KL(synthetic || real) over histograms sharing the joint range."""
    rv = np.asarray(real_values, dtype=np.float64)
    sv = np.asarray(synthetic_values, dtype=np.float64)
    both = np.concatenate([rv, sv])
    both = both[np.isfinite(both)]
    if both.size == 0:
        raise DataError("no finite feature values to compare")
    rng_ = (float(both.min()), float(both.max()))
    hr = feature_histogram(rv, bins=bins, value_range=rng_)
    hs = feature_histogram(sv, bins=bins, value_range=rng_)
    return TextureComparison(feature=feature, real_histogram=hr,
                             synthetic_histogram=hs, kl=kl_divergence(hs, hr, eps=eps))


def feature_table(records, source: str, config: RadiomicsConfig | None = None):
    """Rows (lesion_id, source, energy, correlation) for every usable
    lesion in the record set."""
    cfg = config or RadiomicsConfig()
    rows = []
    for ri, r in enumerate(records):
        for li, lesion in enumerate(r.lesions):
            feats = lesion_features(r.image.values, lesion.bits, cfg)
            if feats is None:
                continue
            rows.append((f"{source}-{ri:05d}-{li}", source, feats[0], feats[1]))
    return rows
