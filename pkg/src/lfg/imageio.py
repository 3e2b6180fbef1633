"""Data model, preprocessing, patient-level splitting, and the phantom
dataset generator used for desk-scale runs.

Grids travel on disk in the LFG1 container: magic ``LFG1``, little-endian
u32 fields (kind 0=intensity / 1=mask, height, width), then a row-major
payload (float32 for intensities, u8 for masks). Datasets are described by
a plain-text manifest, one line per slice::

    patient_id,slice_path,liver_path[,lesion_path...]

Raw HU slices use the same container (kind 0); the [0,1] invariant applies
after windowing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC_GRID = b"LFG1"


@dataclass
class IntensityGrid:
    """Unit-normalized 2-D intensity field."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 8 or v.shape[1] < 8:
            raise DataError(f"intensity grid must be 2-D with dims >= 8, got {v.shape}")
        if not np.isfinite(v).all():
            raise DataError("intensity grid contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise DataError("intensity values must lie in [0,1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class LesionMask:
    """Binary 2-D grid. The set bits mark the region of interest (liver
    interior, lesion interior, or the unmasked pixels of an inpainting
    mask, depending on use)."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {b.shape}")
        if not np.all(np.isin(np.unique(b), (0, 1))):
            raise DataError("mask values must be in {0,1}")
        self.bits = b.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class SliceRecord:
    image: IntensityGrid
    liver: LesionMask
    lesions: list[LesionMask]
    patient_id: str
    has_lesion: bool = False

    def __post_init__(self):
        if self.liver.bits.shape != self.image.values.shape:
            raise DataError("liver mask dims must match the image")
        for m in self.lesions:
            if m.bits.shape != self.image.values.shape:
                raise DataError("lesion mask dims must match the image")
            if np.any(m.bits & ~self.liver.bits):
                raise DataError("lesion mask must lie inside the liver mask")
        self.has_lesion = len(self.lesions) > 0


@dataclass
class DatasetSplit:
    train: list[SliceRecord]
    validation: list[SliceRecord]
    test: list[SliceRecord]
    folds: dict[str, int] | None = None

    def __post_init__(self):
        ids = [patient_ids(part) for part in (self.train, self.validation, self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                shared = ids[i] & ids[j]
                if shared:
                    raise DataError(f"patients {sorted(shared)} appear in two split parts")
        if self.folds is not None:
            train_ids = ids[0]
            if set(self.folds) != train_ids:
                raise DataError("fold assignment must partition exactly the training patients")


def patient_ids(records) -> set[str]:
    return {r.patient_id for r in records}


# ----------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------

def window_normalize(raw: np.ndarray, lo: float = -100.0, hi: float = 200.0) -> IntensityGrid:
    """Linear HU window to [0,1] with clamping."""
    if lo >= hi:
        raise ConfigError(f"window requires lo < hi, got [{lo}, {hi}]")
    raw = np.asarray(raw, dtype=np.float64)
    out = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return IntensityGrid(out.astype(np.float32))


def _resize_bilinear(values: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = values.shape
    ys = (np.arange(th, dtype=np.float64) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw, dtype=np.float64) + 0.5) * (w / tw) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y0 = np.clip(y0.astype(int), 0, h - 1)
    x0 = np.clip(x0.astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    v = values.astype(np.float64)
    top = v[np.ix_(y0, x0)] * (1 - fx) + v[np.ix_(y0, x1)] * fx
    bot = v[np.ix_(y1, x0)] * (1 - fx) + v[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy)


def nearest_index_map(n_in: int, n_out: int) -> np.ndarray:
    """Source index per output pixel under the pixel-area nearest rule."""
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int)
    return np.clip(idx, 0, n_in - 1)


def resize(grid, target) -> IntensityGrid | LesionMask:
    """Bilinear for intensities, nearest-neighbor for masks."""
    th, tw = int(target[0]), int(target[1])
    if th < 8 or tw < 8:
        raise ConfigError(f"resize target dims must be >= 8, got {target}")
    if isinstance(grid, IntensityGrid):
        if (th, tw) == (grid.height, grid.width):
            return IntensityGrid(grid.values.copy())
        out = _resize_bilinear(grid.values, th, tw)
        return IntensityGrid(np.clip(out, 0.0, 1.0).astype(np.float32))
    if isinstance(grid, LesionMask):
        if (th, tw) == (grid.height, grid.width):
            return LesionMask(grid.bits.copy())
        ri = nearest_index_map(grid.height, th)
        ci = nearest_index_map(grid.width, tw)
        return LesionMask(grid.bits[np.ix_(ri, ci)])
    raise DataError(f"resize expects IntensityGrid or LesionMask, got {type(grid).__name__}")


def extract_liver_roi(record: SliceRecord) -> IntensityGrid:
    """Zero every pixel outside the liver contour."""
    if record.liver.area == 0:
        raise DataError(f"record {record.patient_id}: empty liver mask")
    return IntensityGrid(record.image.values * record.liver.bits)


def filter_small_lesions(records, min_pixels: int = 10) -> list[SliceRecord]:
    """Drop lesions unless strictly larger than min_pixels."""
    if min_pixels < 1:
        raise ConfigError("min_pixels must be >= 1")
    out = []
    for r in records:
        kept = [m for m in r.lesions if m.area > min_pixels]
        out.append(replace(r, lesions=kept, has_lesion=len(kept) > 0))
    return out


def split_patients(records, ratios=None, explicit=None, k_folds: int | None = None,
                   seed: int | None = None) -> DatasetSplit:
    """Partition records by patient id, never by slice.

    Either `ratios` = (train, val, test) fractions over patients, or
    `explicit` = (train_ids, val_ids, test_ids). With k_folds, training
    patients are additionally split into k disjoint folds.
    """
    by_patient: dict[str, list[SliceRecord]] = {}
    for r in records:
        if not r.patient_id:
            raise DataError("every record needs a patient id")
        by_patient.setdefault(r.patient_id, []).append(r)
    patients = sorted(by_patient)

    if explicit is not None:
        groups = [list(g) for g in explicit]
        listed = [p for g in groups for p in g]
        if len(listed) != len(set(listed)):
            raise DataError("a patient appears in two explicit split sets")
    else:
        if ratios is None:
            raise ConfigError("split needs ratios or explicit patient lists")
        tr, va, te = (float(x) for x in ratios)
        total = tr + va + te
        if total <= 0:
            raise ConfigError("split ratios must sum to a positive value")
        order = list(patients)
        if seed is not None:
            order = list(np.random.default_rng(seed).permutation(order))
        n = len(order)
        n_tr = int(round(n * tr / total))
        n_va = int(round(n * va / total))
        n_tr = min(n_tr, n)
        n_va = min(n_va, n - n_tr)
        groups = [order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:]]

    parts = [[], [], []]
    for gi, group in enumerate(groups):
        for pid in group:
            parts[gi].extend(by_patient.get(pid, []))

    folds = None
    if k_folds is not None:
        if k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        train_patients = sorted({p for p in groups[0] if p in by_patient})
        folds = {pid: i % k_folds for i, pid in enumerate(train_patients)}
    return DatasetSplit(parts[0], parts[1], parts[2], folds=folds)


# ----------------------------------------------------------------------
# phantom generator
# ----------------------------------------------------------------------

@dataclass
class PhantomConfig:
    dims: tuple[int, int] = (64, 64)
    lesion_rate: float = 0.5
    slices_per_patient: int = 5
    lesion_darkening: tuple[float, float] = (0.45, 0.62)
    # lesion texture: per-lesion draws of coarse-grained noise (grain size
    # and amplitude vary lesion to lesion) plus a little pixel-level
    # noise, giving a heterogeneous but convnet-matchable texture family
    lesion_noise_coarse: tuple[float, float] = (0.05, 0.18)
    lesion_noise_fine: tuple[float, float] = (0.006, 0.04)
    lesion_grain_sizes: tuple = (2, 3)
    lesion_radii: tuple[float, float] = (4.0, 8.5)
    background_noise: float = 0.012
    max_lesions_per_slice: int = 2


def _ellipse_mask(h, w, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yc = yy + 0.5 - cy
    xc = xx + 0.5 - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = xc * ca + yc * sa
    v = -xc * sa + yc * ca
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def _smooth_field(rng, h, w, coarse: int = 6) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, size=(coarse, coarse))
    return _resize_bilinear(grid, h, w)


def generate_phantoms(seed: int, count: int, config: PhantomConfig | None = None) -> list[SliceRecord]:
    """Deterministic synthetic liver slices: a smooth low-frequency texture
    inside an elliptical liver, with darker, noisier ellipse-blob lesions
    on exactly floor(count * lesion_rate) slices."""
    cfg = config or PhantomConfig()
    h, w = cfg.dims
    if h < 32 or w < 32:
        raise ConfigError(f"phantom dims must be >= 32, got {cfg.dims}")
    if not 0.0 <= cfg.lesion_rate <= 1.0:
        raise ConfigError("lesion_rate must lie in [0,1]")

    rng = np.random.default_rng(seed)
    n_lesioned = int(np.floor(count * cfg.lesion_rate))
    lesion_slots = set(rng.choice(count, size=n_lesioned, replace=False).tolist()) if n_lesioned else set()

    records = []
    for idx in range(count):
        pid = f"P{idx // cfg.slices_per_patient:03d}"
        cy = h / 2 + rng.uniform(-0.04, 0.04) * h
        cx = w / 2 + rng.uniform(-0.04, 0.04) * w
        ry = rng.uniform(0.30, 0.38) * h
        rx = rng.uniform(0.30, 0.38) * w
        liver = _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))

        base = 0.55 + 0.06 * _smooth_field(rng, h, w)
        base = base + rng.normal(0.0, cfg.background_noise, size=(h, w))
        img = np.clip(base, 0.05, 0.95) * liver

        lesions: list[np.ndarray] = []
        if idx in lesion_slots:
            n_lesions = int(rng.integers(1, cfg.max_lesions_per_slice + 1))
            occupied = np.zeros((h, w), dtype=np.uint8)
            for _ in range(n_lesions):
                for _attempt in range(50):
                    lry = rng.uniform(*cfg.lesion_radii)
                    lrx = rng.uniform(*cfg.lesion_radii)
                    lcy = rng.uniform(cy - 0.55 * ry, cy + 0.55 * ry)
                    lcx = rng.uniform(cx - 0.55 * rx, cx + 0.55 * rx)
                    blob = _ellipse_mask(h, w, lcy, lcx, lry, lrx, rng.uniform(0, np.pi))
                    if blob.sum() <= 10:
                        continue
                    if np.any(blob & ~liver) or np.any(blob & occupied):
                        continue
                    dark = rng.uniform(*cfg.lesion_darkening)
                    grain = int(rng.choice(cfg.lesion_grain_sizes))
                    sigma_c = rng.uniform(*cfg.lesion_noise_coarse)
                    sigma_f = rng.uniform(*cfg.lesion_noise_fine)
                    k = max(h, w) // grain + 2
                    coarse = rng.normal(0.0, sigma_c, size=(k, k))
                    noise = (np.repeat(np.repeat(coarse, grain, 0), grain, 1)[:h, :w]
                             + rng.normal(0.0, sigma_f, size=(h, w)))
                    img = np.where(blob, np.clip(img * dark + noise, 0.0, 1.0), img)
                    occupied |= blob
                    lesions.append(blob)
                    break

        records.append(SliceRecord(
            image=IntensityGrid(np.clip(img, 0.0, 1.0).astype(np.float32)),
            liver=LesionMask(liver),
            lesions=[LesionMask(b) for b in lesions],
            patient_id=pid,
        ))
    return records


# ----------------------------------------------------------------------
# LFG1 container + manifest
# ----------------------------------------------------------------------

def write_grid(path, grid: IntensityGrid | LesionMask):
    path = Path(path)
    if isinstance(grid, IntensityGrid):
        kind, payload = 0, grid.values.astype("<f4").tobytes()
        h, w = grid.values.shape
    elif isinstance(grid, LesionMask):
        kind, payload = 1, grid.bits.astype(np.uint8).tobytes()
        h, w = grid.bits.shape
    else:
        raise DataError(f"cannot serialize {type(grid).__name__}")
    with open(path, "wb") as f:
        f.write(MAGIC_GRID)
        f.write(struct.pack("<III", kind, h, w))
        f.write(payload)


def write_raw_grid(path, values: np.ndarray):
    """Serialize an un-normalized float field (e.g. raw HU) as kind 0."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataError("raw grid must be 2-D")
    with open(path, "wb") as f:
        f.write(MAGIC_GRID)
        f.write(struct.pack("<III", 0, values.shape[0], values.shape[1]))
        f.write(values.astype("<f4").tobytes())


def read_grid(path, raw: bool = False):
    """Load a container; returns IntensityGrid / LesionMask, or the bare
    float array when raw=True (for not-yet-windowed inputs)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC_GRID:
        raise DataError(f"{path}: not an LFG1 grid container")
    kind, h, w = struct.unpack("<III", blob[4:16])
    if kind == 0:
        values = np.frombuffer(blob[16:16 + 4 * h * w], dtype="<f4").reshape(h, w).copy()
        return values if raw else IntensityGrid(values)
    if kind == 1:
        bits = np.frombuffer(blob[16:16 + h * w], dtype=np.uint8).reshape(h, w).copy()
        return LesionMask(bits)
    raise DataError(f"{path}: unknown grid kind {kind}")


def write_dataset(records, out_dir) -> Path:
    """Write grids plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, r in enumerate(records):
        stem = f"s{i:05d}"
        slice_path = out_dir / f"{stem}_img.lfg"
        liver_path = out_dir / f"{stem}_liver.lfg"
        write_grid(slice_path, r.image)
        write_grid(liver_path, r.liver)
        lesion_paths = []
        for j, m in enumerate(r.lesions):
            lp = out_dir / f"{stem}_lesion{j}.lfg"
            write_grid(lp, m)
            lesion_paths.append(lp.name)
        lines.append(",".join([r.patient_id, slice_path.name, liver_path.name] + lesion_paths))
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def manifest_rows(manifest_path):
    """Parsed manifest lines as (patient_id, slice_name, liver_name,
    lesion_names) tuples."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    rows = []
    for ln, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < 3:
            raise DataError(f"{manifest_path}:{ln}: need patient_id,slice_path,liver_path")
        rows.append((fields[0], fields[1], fields[2], fields[3:]))
    return rows


def read_dataset(manifest_path) -> list[SliceRecord]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for pid, slice_name, liver_name, lesion_names in manifest_rows(manifest_path):
        ln = len(records) + 1
        image = read_grid(base / slice_name)
        liver = read_grid(base / liver_name)
        if not isinstance(image, IntensityGrid) or not isinstance(liver, LesionMask):
            raise DataError(f"{manifest_path}:{ln}: wrong grid kinds")
        lesions = []
        for name in lesion_names:
            m = read_grid(base / name)
            if not isinstance(m, LesionMask):
                raise DataError(f"{manifest_path}:{ln}: lesion file {name} is not a mask")
            lesions.append(m)
        records.append(SliceRecord(image=image, liver=liver, lesions=lesions, patient_id=pid))
    return records
