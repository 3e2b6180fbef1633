"""Statistical model of lesion contour shapes.

A shape is a flat vector [x1..xn, y1..yn] of n=200 landmarks placed at
equal arc-length intervals around the contour, traversed counter-clockwise
starting from the vertex of maximum y (ties broken by minimum x). Shapes
are registered by Procrustes alignment (translation, area-matched scale,
least-squares rotation, plus a cyclic landmark re-indexing search since
the starting correspondence is otherwise arbitrary), then decomposed by
centered PCA into a mean and 10 orthonormal variation modes. New masks are
sampled by weighting the modes, then placed with a random similarity
transform and rasterized by scan-line fill.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PlacementError
from .imageio import LesionMask, SliceRecord

N_LANDMARKS = 200
MAGIC_MODEL = b"LSM1"


def as_points(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    n = vec.size // 2
    return np.stack([vec[:n], vec[n:]], axis=1)


def as_vector(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.concatenate([points[:, 0], points[:, 1]])


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise in y-up coords)."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def shape_area(vec: np.ndarray) -> float:
    return abs(polygon_area(as_points(vec)))


# ----------------------------------------------------------------------
# contour resampling
# ----------------------------------------------------------------------

def resample_contour(polygon, n: int = N_LANDMARKS) -> np.ndarray:
    """Place n landmarks at equal arc-length spacing around a closed polygon.

    The first landmark sits on the vertex of maximum y (ties: minimum x)
    and traversal is counter-clockwise, so landmark correspondence is
    stable across shapes.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise DataError("polygon must be a (V,2) vertex list with V >= 3")
    # drop consecutive duplicates (including a repeated closing vertex)
    keep = [0]
    for i in range(1, len(pts)):
        if not np.allclose(pts[i], pts[keep[-1]]):
            keep.append(i)
    if np.allclose(pts[keep[-1]], pts[keep[0]]) and len(keep) > 1:
        keep.pop()
    pts = pts[keep]
    if len(pts) < 3:
        raise DataError("degenerate polygon")

    if polygon_area(pts) < 0:
        pts = pts[::-1]

    start = int(np.lexsort((pts[:, 0], -pts[:, 1]))[0])
    pts = np.roll(pts, -start, axis=0)

    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    perimeter = float(seg.sum())
    if perimeter <= 0:
        raise DataError("polygon has zero perimeter")
    cum = np.concatenate([[0.0], np.cumsum(seg)])

    targets = np.arange(n, dtype=np.float64) * (perimeter / n)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    t = (targets - cum[idx]) / seg[idx]
    samples = closed[idx] + t[:, None] * (closed[idx + 1] - closed[idx])
    return as_vector(samples)


# ----------------------------------------------------------------------
# Procrustes registration
# ----------------------------------------------------------------------

@dataclass
class SimilarityTransform:
    rotation: float
    scale: float
    translation: np.ndarray
    cyclic_shift: int = 0
    residual: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DataError("similarity scale must be positive")


def _to_complex(vec: np.ndarray) -> np.ndarray:
    p = as_points(vec)
    return p[:, 0] + 1j * p[:, 1]


def procrustes_align(shape: np.ndarray, reference: np.ndarray):
    """Align `shape` to `reference`: common centroid, scale matched so the
    enclosed areas agree, then the least-squares rotation over all cyclic
    landmark re-indexings. Returns (aligned_vector, SimilarityTransform)."""
    shape = np.asarray(shape, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if shape.size != reference.size or shape.size % 2:
        raise DataError("shape and reference must be equal even-length vectors")

    zs = _to_complex(shape)
    zr = _to_complex(reference)
    cs = zs.mean()
    cr = zr.mean()
    zs = zs - cs
    zr = zr - cr

    area_s = abs(polygon_area(np.stack([zs.real, zs.imag], axis=1)))
    area_r = abs(polygon_area(np.stack([zr.real, zr.imag], axis=1)))
    if area_s <= 0:
        raise DataError("cannot align a zero-area shape")
    scale = float(np.sqrt(area_r / area_s))
    zs = zs * scale

    n = zs.size
    ref_sq = float(np.sum(np.abs(zr) ** 2))
    shp_sq = float(np.sum(np.abs(zs) ** 2))
    best = None
    for k in range(n):
        zk = np.roll(zs, -k)
        corr = np.vdot(zk, zr)  # sum conj(zk) * zr
        resid = ref_sq + shp_sq - 2.0 * abs(corr)
        if best is None or resid < best[0] - 1e-15:
            best = (resid, k, np.angle(corr) if abs(corr) > 0 else 0.0)
    resid, k, theta = best

    aligned = np.roll(zs, -k) * np.exp(1j * theta) + cr
    rot = complex(np.cos(theta), np.sin(theta))
    trans = cr - rot * scale * cs
    transform = SimilarityTransform(
        rotation=float(theta),
        scale=scale,
        translation=np.array([trans.real, trans.imag]),
        cyclic_shift=k,
        residual=max(float(resid), 0.0),
    )
    return as_vector(np.stack([aligned.real, aligned.imag], axis=1)), transform


def _normalize(vec: np.ndarray) -> np.ndarray:
    """Center at the origin and scale to unit enclosed area."""
    z = _to_complex(vec)
    z = z - z.mean()
    area = abs(polygon_area(np.stack([z.real, z.imag], axis=1)))
    if area <= 0:
        raise DataError("cannot normalize a zero-area shape")
    z = z / np.sqrt(area)
    return as_vector(np.stack([z.real, z.imag], axis=1))


def align_pool(shapes, max_rounds: int = 10, tol: float = 1e-10):
    """Generalized Procrustes: iteratively align every shape to the running
    mean (itself re-normalized to unit area each round)."""
    shapes = [np.asarray(s, dtype=np.float64) for s in shapes]
    reference = _normalize(shapes[0])
    aligned = list(shapes)
    for _ in range(max_rounds):
        aligned = [procrustes_align(s, reference)[0] for s in aligned]
        new_ref = _normalize(np.mean(aligned, axis=0))
        if np.max(np.abs(new_ref - reference)) < tol:
            reference = new_ref
            break
        reference = new_ref
    return aligned, reference


# ----------------------------------------------------------------------
# PCA shape model
# ----------------------------------------------------------------------

@dataclass
class ShapeModel:
    mean: np.ndarray          # (2n,)
    modes: np.ndarray         # (k, 2n), orthonormal rows
    eigenvalues: np.ndarray   # (k,), descending, >= 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if self.modes.shape != (self.eigenvalues.size, self.mean.size):
            raise DataError("shape model dims are inconsistent")

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size


def fit_shape_model(pool, n_modes: int = 10, align: bool = True,
                    max_rounds: int = 10) -> ShapeModel:
    """Mean plus the top eigenpairs of the centered sample covariance of
    the aligned pool."""
    shapes = [np.asarray(s, dtype=np.float64) for s in pool]
    if len(shapes) < n_modes + 1:
        raise DataError(f"shape pool needs at least {n_modes + 1} shapes, got {len(shapes)}")
    for s in shapes:
        if not np.isfinite(s).all():
            raise DataError("shape pool contains non-finite coordinates")
    if align:
        shapes, _ = align_pool(shapes, max_rounds=max_rounds)

    stack = np.stack(shapes)
    mean = stack.mean(axis=0)
    centered = stack - mean
    cov = centered.T @ centered / (len(shapes) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_modes]
    eigenvalues = np.clip(evals[order], 0.0, None)
    modes = evecs[:, order].T
    # deterministic mode signs: largest-magnitude component positive
    for i in range(modes.shape[0]):
        j = int(np.argmax(np.abs(modes[i])))
        if modes[i, j] < 0:
            modes[i] = -modes[i]
    return ShapeModel(mean=mean, modes=modes, eigenvalues=eigenvalues)


def sample_shape(model: ShapeModel, rng: np.random.Generator,
                 sigma_clip: float = 3.0, weights=None) -> np.ndarray:
    """Mean plus Gaussian-weighted modes, re-normalized to unit area.

    Weights are N(0, eigenvalue_k) truncated at +/- sigma_clip standard
    deviations; pass `weights` to force them (e.g. zeros for the mean)."""
    if weights is None:
        sd = np.sqrt(model.eigenvalues)
        w = np.zeros(model.n_modes)
        for k in range(model.n_modes):
            if sd[k] == 0:
                continue
            draw = rng.normal(0.0, sd[k])
            while abs(draw) > sigma_clip * sd[k]:
                draw = rng.normal(0.0, sd[k])
            w[k] = draw
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.size != model.n_modes:
            raise DataError("weight vector length must match the mode count")
    shape = model.mean + w @ model.modes
    return _normalize(shape)


# ----------------------------------------------------------------------
# placement and rasterization
# ----------------------------------------------------------------------

@dataclass
class PlacementTransform:
    rotation: float
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise DataError("placement scale must be positive")


def apply_transform(shape: np.ndarray, t: PlacementTransform) -> np.ndarray:
    pts = as_points(shape)
    ca, sa = np.cos(t.rotation), np.sin(t.rotation)
    rot = np.array([[ca, -sa], [sa, ca]])
    return as_vector(pts @ rot.T * t.scale + np.asarray(t.translation))


def rasterize_polygon(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Scan-line even-odd fill at pixel centers (col+0.5, row+0.5).

    A pixel is inside when the number of edge crossings strictly to the
    right of its center is odd.
    """
    pts = np.asarray(points, dtype=np.float64)
    y1 = pts[:, 1]
    y2 = np.roll(pts[:, 1], -1)
    x1 = pts[:, 0]
    x2 = np.roll(pts[:, 0], -1)
    mask = np.zeros((height, width), dtype=np.uint8)
    r_lo = max(0, int(np.floor(pts[:, 1].min() - 0.5)))
    r_hi = min(height - 1, int(np.ceil(pts[:, 1].max())))
    for r in range(r_lo, r_hi + 1):
        yc = r + 0.5
        hit = (y1 <= yc) != (y2 <= yc)
        if not hit.any():
            continue
        t = (yc - y1[hit]) / (y2[hit] - y1[hit])
        xs = np.sort(x1[hit] + t * (x2[hit] - x1[hit]))
        for a, b in zip(xs[0::2], xs[1::2]):
            c0 = max(0, int(np.ceil(a - 0.5)))
            c1 = min(width - 1, int(np.ceil(b - 0.5)) - 1)
            if c1 >= c0:
                mask[r, c0:c1 + 1] = 1
    return mask


def place_and_rasterize(shape: np.ndarray, record: SliceRecord,
                        rng: np.random.Generator, size_range,
                        max_retries: int = 100):
    """Drop the shape somewhere inside the liver: rotation uniform in
    [0,2pi), area log-uniform over size_range, center uniform over liver
    pixels; retried until the rasterized mask is nonempty and entirely
    inside the liver. Returns (LesionMask, PlacementTransform)."""
    liver = record.liver.bits
    rows, cols = np.nonzero(liver)
    if rows.size == 0:
        raise PlacementError("record has an empty liver mask")
    lo, hi = float(size_range[0]), float(size_range[1])
    if not (0 < lo <= hi):
        raise ConfigError(f"invalid size range {size_range}")

    unit = _normalize(shape)
    h, w = liver.shape
    for _ in range(max_retries):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        area = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        pick = int(rng.integers(0, rows.size))
        center = np.array([cols[pick] + 0.5, rows[pick] + 0.5])
        t = PlacementTransform(rotation=theta, scale=np.sqrt(area), translation=center)
        pts = as_points(apply_transform(unit, t))
        raster = rasterize_polygon(pts, h, w)
        if raster.sum() == 0:
            continue
        if np.any(raster & ~liver):
            continue
        return LesionMask(raster), t
    raise PlacementError(f"no valid placement found in {max_retries} attempts")


# ----------------------------------------------------------------------
# mask -> contour extraction (for building the training pool)
# ----------------------------------------------------------------------

def trace_mask_contour(mask: np.ndarray) -> np.ndarray:
    """Outer boundary polygon of a binary region, as the chain of pixel-edge
    segments between set and unset cells. Returns the largest loop."""
    m = np.asarray(mask).astype(bool)
    if m.sum() == 0:
        raise DataError("cannot trace an empty mask")
    edges: dict[tuple, list[tuple]] = {}

    def emit(a, b):
        edges.setdefault(a, []).append(b)

    rows, cols = np.nonzero(m)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            emit((c, r), (c + 1, r))
        if not padded[pr, pc + 1]:
            emit((c + 1, r), (c + 1, r + 1))
        if not padded[pr + 1, pc]:
            emit((c + 1, r + 1), (c, r + 1))
        if not padded[pr, pc - 1]:
            emit((c, r + 1), (c, r))

    loops = []
    while edges:
        start = min(edges)
        loop = [start]
        prev = None
        cur = start
        while True:
            outs = edges[cur]
            if len(outs) == 1 or prev is None:
                nxt = outs.pop(0)
            else:
                # corner-touching pixels: prefer the sharpest left turn
                din = (cur[0] - prev[0], cur[1] - prev[1])
                def turn(cand):
                    dout = (cand[0] - cur[0], cand[1] - cur[1])
                    return din[0] * dout[1] - din[1] * dout[0]
                outs.sort(key=turn)
                nxt = outs.pop(0)
            if not edges[cur]:
                del edges[cur]
            if nxt == start:
                break
            loop.append(nxt)
            prev, cur = cur, nxt
        loops.append(np.asarray(loop, dtype=np.float64))
    best = max(loops, key=lambda lp: abs(polygon_area(lp)))
    return best


def contour_pool_from_records(records, min_pixels: int = 10) -> list[np.ndarray]:
    """Resampled shape vector per lesion across a record set."""
    pool = []
    for r in records:
        for lesion in r.lesions:
            if lesion.area <= min_pixels:
                continue
            poly = trace_mask_contour(lesion.bits)
            pool.append(resample_contour(poly))
    return pool


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def save_shape_model(path, model: ShapeModel):
    with open(Path(path), "wb") as f:
        f.write(MAGIC_MODEL)
        n = model.mean.size // 2
        f.write(struct.pack("<II", n, model.n_modes))
        f.write(model.mean.astype("<f8").tobytes())
        f.write(model.modes.astype("<f8").tobytes())
        f.write(model.eigenvalues.astype("<f8").tobytes())


def load_shape_model(path) -> ShapeModel:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC_MODEL:
        raise DataError(f"{path}: not a shape-model container")
    n, k = struct.unpack("<II", blob[4:12])
    d = 2 * n
    off = 12
    mean = np.frombuffer(blob[off:off + 8 * d], dtype="<f8").copy()
    off += 8 * d
    modes = np.frombuffer(blob[off:off + 8 * k * d], dtype="<f8").reshape(k, d).copy()
    off += 8 * k * d
    eigenvalues = np.frombuffer(blob[off:off + 8 * k], dtype="<f8").copy()
    return ShapeModel(mean=mean, modes=modes, eigenvalues=eigenvalues)
