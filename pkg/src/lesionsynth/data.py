"""Phantom generation, real-dataset ingestion, splits, and mixing.

The procedural phantoms stand in for clinical scan corpora: a multiplicative
speckle background with one inserted lesion per image.  Benign lesions are
smooth ellipses with a homogeneous darker interior and a crisp border;
malignant lesions are radius-perturbed star shapes with a heterogeneous
interior and a diffuse border.  Masks are exact rasterizations, so the two
classes carry a genuine boundary-curvature gap that the rest of the pipeline
can learn and be tested against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


class TumorClass(IntEnum):
    BENIGN = 0
    MALIGNANT = 1


class MissingMask(Exception):
    pass


class UnreadableFile(Exception):
    pass


class EmptyMask(Exception):
    pass


class ClassTooSmall(Exception):
    pass


class PoolExhausted(Exception):
    pass


@dataclass
class DatasetRecord:
    record_id: str
    image: np.ndarray  # H×W float in [0,1]
    mask: np.ndarray   # H×W uint8 in {0,1}
    tumor_class: TumorClass
    source: str        # real | synthetic | phantom

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image/mask shape mismatch: {self.image.shape} vs {self.mask.shape}"
            )


@dataclass
class PhantomParams:
    """Free parameters of the phantom model; defaults target 64x64 training."""

    resolution: int = 64
    tumor_class: TumorClass | None = None  # None draws uniformly
    radius_frac: tuple[float, float] = (0.14, 0.26)
    background_level: tuple[float, float] = (0.40, 0.60)
    lesion_contrast: tuple[float, float] = (0.30, 0.55)
    speckle_sigma: float = 1.5
    speckle_strength: float = 0.30
    # texture_variant shifts speckle statistics; used for the external test family
    texture_variant: str = "standard"


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class LoadResult:
    records: list[DatasetRecord]
    errors: list[tuple[str, Exception]]


def _ellipse_mask(n: int, rng: np.random.Generator) -> np.ndarray:
    margin = 4.0
    a = rng.uniform(0.14, 0.26) * n
    b = a * rng.uniform(0.6, 1.0)
    theta = rng.uniform(0, np.pi)
    rmax = max(a, b)
    cy = rng.uniform(margin + rmax, n - margin - rmax)
    cx = rng.uniform(margin + rmax, n - margin - rmax)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _star_mask(n: int, rng: np.random.Generator, radius_frac) -> np.ndarray:
    r0 = rng.uniform(*radius_frac) * n
    n_modes = rng.integers(3, 5)
    ks = rng.integers(4, 9, size=n_modes)
    amps = rng.uniform(0.10, 0.28, size=n_modes)
    phases = rng.uniform(0, 2 * np.pi, size=n_modes)
    rmax = r0 * (1.0 + amps.sum())
    margin = 4.0
    lo, hi = margin + rmax, n - margin - rmax
    if lo >= hi:  # shape too large for the grid; shrink
        r0 *= (n / 2 - margin) / rmax * 0.9
        rmax = r0 * (1.0 + amps.sum())
        lo, hi = margin + rmax, n - margin - rmax
    cy = rng.uniform(lo, hi)
    cx = rng.uniform(lo, hi)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    rfun = r0 * (
        1.0 + sum(a * np.cos(k * theta + p) for a, k, p in zip(amps, ks, phases))
    )
    return (rad <= rfun).astype(np.uint8)


def _speckle_field(n: int, rng: np.random.Generator, params: PhantomParams) -> np.ndarray:
    sigma = params.speckle_sigma
    strength = params.speckle_strength
    if params.texture_variant == "coarse":
        sigma, strength = sigma * 2.0, strength * 1.3
    raw = rng.exponential(1.0, size=(n, n))
    smoothed = ndimage.gaussian_filter(raw, sigma, mode="nearest")
    smoothed /= smoothed.mean()
    return 1.0 + strength * (smoothed - 1.0)


def generate_phantom(params: PhantomParams, seed: int) -> DatasetRecord:
    """One speckle-background phantom with a single lesion and exact mask."""
    rng = np.random.default_rng(seed)
    n = params.resolution
    k = params.tumor_class
    if k is None:
        k = TumorClass(int(rng.integers(0, 2)))

    for attempt in range(8):
        if k == TumorClass.BENIGN:
            mask = _ellipse_mask(n, rng)
        else:
            mask = _star_mask(n, rng, params.radius_frac)
        if mask.sum() >= 16:
            break
    else:
        raise RuntimeError(f"could not place a lesion of class {k} at seed {seed}")

    background = rng.uniform(*params.background_level)
    contrast = rng.uniform(*params.lesion_contrast)
    base = np.full((n, n), background)
    lesion_level = background * contrast

    if k == TumorClass.BENIGN:
        alpha = mask.astype(np.float64)  # crisp border
        interior = np.full((n, n), lesion_level)
    else:
        alpha = ndimage.gaussian_filter(mask.astype(np.float64), 1.2, mode="nearest")
        alpha = np.clip(alpha * 1.2, 0.0, 1.0)  # diffuse border
        texture = ndimage.gaussian_filter(rng.exponential(1.0, size=(n, n)), 1.0)
        texture /= texture.mean()
        interior = lesion_level * (0.6 + 0.8 * texture)  # heterogeneous interior

    anatomy = base * (1 - alpha) + interior * alpha
    image = np.clip(anatomy * _speckle_field(n, rng, params), 0.0, 1.0)
    return DatasetRecord(
        record_id=f"phantom-{seed:010d}",
        image=image,
        mask=mask,
        tumor_class=k,
        source="phantom",
    )


def generate_phantom_set(
    params: PhantomParams, count: int, base_seed: int
) -> list[DatasetRecord]:
    return [generate_phantom(params, base_seed + i) for i in range(count)]


def bounding_rectangle(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(row, col, height, width) of the mask's tight bounding box."""
    rows = np.any(mask >= 0.5, axis=1)
    cols = np.any(mask >= 0.5, axis=0)
    if not rows.any():
        raise EmptyMask("cannot bound an empty mask")
    r0, r1 = np.nonzero(rows)[0][[0, -1]]
    c0, c1 = np.nonzero(cols)[0][[0, -1]]
    return int(r0), int(c0), int(r1 - r0 + 1), int(c1 - c0 + 1)


def rectangle_map(shape: tuple[int, int], rect: tuple[int, int, int, int]) -> np.ndarray:
    """Binary H×W map that is 1 inside the (row, col, h, w) rectangle."""
    r, c, h, w = rect
    if h <= 0 or w <= 0 or h * w < 16:
        raise ValueError(f"rectangle area must be >= 16 pixels, got {h}x{w}")
    if r < 2 or c < 2 or r + h > shape[0] - 2 or c + w > shape[1] - 2:
        raise ValueError(f"rectangle {rect} violates the 2-pixel edge margin")
    out = np.zeros(shape, dtype=np.uint8)
    out[r : r + h, c : c + w] = 1
    return out


# ---------------------------------------------------------------------------
# Directory ingestion (BUSI-style image/mask pairing)
# ---------------------------------------------------------------------------

DEFAULT_LAYOUT = {
    "classes": {"benign": "benign", "malignant": "malignant"},
    "image_suffix": ".png",
    "mask_suffix": "_mask",
}


def _load_grayscale(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except Exception as exc:
        raise UnreadableFile(str(path)) from exc
    return arr / 255.0


def _resize(arr: np.ndarray, resolution: int, nearest: bool) -> np.ndarray:
    from PIL import Image

    mode_arr = (arr * 255.0).astype(np.uint8)
    resample = Image.NEAREST if nearest else Image.BILINEAR
    img = Image.fromarray(mode_arr).resize((resolution, resolution), resample)
    return np.asarray(img, dtype=np.float64) / 255.0


def load_directory(
    root, layout: dict | None = None, resolution: int = 64
) -> LoadResult:
    """Ingest a class-per-subdirectory corpus of image/mask pairs.

    Layout keys: ``classes`` maps class names to subdirectories; the mask for
    ``stem<image_suffix>`` is ``stem<mask_suffix><image_suffix>`` in the same
    directory.  Unreadable files, missing masks, and all-zero masks are
    collected as errors and their records skipped.
    """
    layout = {**DEFAULT_LAYOUT, **(layout or {})}
    root = Path(root)
    records: list[DatasetRecord] = []
    errors: list[tuple[str, Exception]] = []
    suffix = layout["image_suffix"]
    mask_tag = layout["mask_suffix"]

    for cls_name, subdir in sorted(layout["classes"].items()):
        k = TumorClass.BENIGN if cls_name == "benign" else TumorClass.MALIGNANT
        cls_dir = root / subdir
        if not cls_dir.is_dir():
            continue
        for img_path in sorted(cls_dir.glob(f"*{suffix}")):
            if img_path.stem.endswith(mask_tag):
                continue
            mask_path = img_path.with_name(img_path.stem + mask_tag + suffix)
            try:
                if not mask_path.exists():
                    raise MissingMask(str(mask_path))
                image = _resize(_load_grayscale(img_path), resolution, nearest=False)
                mask = _resize(_load_grayscale(mask_path), resolution, nearest=True)
                mask = (mask >= 0.5).astype(np.uint8)
                if mask.sum() == 0:
                    raise EmptyMask(str(mask_path))
            except (MissingMask, UnreadableFile, EmptyMask) as exc:
                errors.append((str(img_path), exc))
                continue
            records.append(
                DatasetRecord(
                    record_id=f"{cls_name}/{img_path.stem}",
                    image=image,
                    mask=mask,
                    tumor_class=k,
                    source="real",
                )
            )
    for path, exc in errors:
        log.warning("skipped %s: %s", path, exc)
    return LoadResult(records=records, errors=errors)


# ---------------------------------------------------------------------------
# On-disk dataset directories (images/ masks/ labels.csv)
# ---------------------------------------------------------------------------


def save_dataset(records: list[DatasetRecord], out_dir) -> Path:
    """Write records as 8-bit PNG image/mask pairs plus a labels.csv index."""
    import csv

    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        name = rec.record_id.replace("/", "_") + ".png"
        Image.fromarray((np.clip(rec.image, 0, 1) * 255).round().astype(np.uint8)).save(
            out / "images" / name
        )
        Image.fromarray((rec.mask * 255).astype(np.uint8)).save(out / "masks" / name)
        rows.append((rec.record_id.replace("/", "_"), rec.tumor_class.name.lower(), rec.source))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "class", "source"])
        writer.writerows(rows)
    return out


def load_dataset_dir(root) -> list[DatasetRecord]:
    """Read a directory written by save_dataset / the image generators."""
    import csv

    root = Path(root)
    labels_path = root / "labels.csv"
    records = []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            rid = row["record_id"]
            image = _load_grayscale(root / "images" / f"{rid}.png")
            mask_file = root / "masks" / f"{rid}.png"
            mask = (
                (_load_grayscale(mask_file) >= 0.5).astype(np.uint8)
                if mask_file.exists()
                else np.zeros_like(image, dtype=np.uint8)
            )
            k = TumorClass.BENIGN if row["class"] == "benign" else TumorClass.MALIGNANT
            records.append(
                DatasetRecord(
                    record_id=rid,
                    image=image,
                    mask=mask,
                    tumor_class=k,
                    source=row.get("source", "real"),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Splits and synthetic mixing
# ---------------------------------------------------------------------------


def split(
    records: list[DatasetRecord], spec: SplitSpec
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic class-stratified train/test split on sorted record ids."""
    if not (0.0 < spec.train_fraction < 1.0):
        raise ValueError("train_fraction must lie in (0,1)")
    by_class: dict[TumorClass, list[DatasetRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.tumor_class, []).append(rec)
    for k, group in by_class.items():
        if len(group) < 2:
            raise ClassTooSmall(f"class {k.name} has {len(group)} record(s)")
    rng = np.random.default_rng(spec.seed)
    train: list[DatasetRecord] = []
    test: list[DatasetRecord] = []
    for k in sorted(by_class):
        group = sorted(by_class[k], key=lambda r: r.record_id)
        order = rng.permutation(len(group))
        n_train = round(spec.train_fraction * len(group))
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(group[idx])
    return train, test


def mix_synthetic(
    real_train: list[DatasetRecord],
    synthetic_pool: list[DatasetRecord],
    ratio: float,
) -> list[DatasetRecord]:
    """real_train plus round(ratio*|real_train|) synthetic records.

    Synthetic records are taken in pool order, class-stratified so the
    addition matches the real class proportions within one record.
    """
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    n_add = round(ratio * len(real_train))
    if n_add == 0:
        return list(real_train)

    real_counts = {k: 0 for k in TumorClass}
    for rec in real_train:
        real_counts[rec.tumor_class] += 1
    # largest-remainder apportionment of n_add across classes
    quotas = {
        k: n_add * real_counts[k] / len(real_train) for k in TumorClass
    }
    take = {k: int(quotas[k]) for k in TumorClass}
    remainder = n_add - sum(take.values())
    for k in sorted(TumorClass, key=lambda k: quotas[k] - take[k], reverse=True):
        if remainder <= 0:
            break
        take[k] += 1
        remainder -= 1

    pool_by_class: dict[TumorClass, list[DatasetRecord]] = {k: [] for k in TumorClass}
    for rec in synthetic_pool:
        pool_by_class[rec.tumor_class].append(rec)
    added: list[DatasetRecord] = []
    for k in sorted(TumorClass):
        if len(pool_by_class[k]) < take[k]:
            raise PoolExhausted(
                f"need {take[k]} synthetic {k.name} records, pool has {len(pool_by_class[k])}"
            )
        added.extend(pool_by_class[k][: take[k]])
    return list(real_train) + added


# ---------------------------------------------------------------------------
# Ordinary augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    flip: bool = False
    angle_deg: float = 0.0
    shift_frac: tuple[float, float] = (0.0, 0.0)
    brightness: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            flip=bool(rng.random() < 0.5),
            angle_deg=float(rng.uniform(-15.0, 15.0)),
            shift_frac=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
            brightness=float(rng.uniform(0.8, 1.2)),
        )


def _geometric_transform(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    n_r, n_c = arr.shape
    angle = math.radians(params.angle_deg)
    shift = np.array([params.shift_frac[0] * n_r, params.shift_frac[1] * n_c])
    if params.angle_deg == 0.0 and not shift.any():
        return arr.copy()
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([(n_r - 1) / 2.0, (n_c - 1) / 2.0])
    inv = rot.T  # output -> input mapping
    offset = center - inv @ (center + shift)
    mode = "nearest" if order > 0 else "constant"
    return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode=mode)


def apply_augment(record: DatasetRecord, params: AugmentParams) -> DatasetRecord:
    """Apply one augmentation draw; geometry hits image and mask identically."""
    image = record.image
    mask = record.mask.astype(np.float64)
    if params.flip:
        image = np.fliplr(image)
        mask = np.fliplr(mask)
    image = _geometric_transform(np.ascontiguousarray(image), params, order=1)
    mask = _geometric_transform(np.ascontiguousarray(mask), params, order=0)
    if params.brightness != 1.0:
        image = np.clip(image * params.brightness, 0.0, 1.0)
    return replace(
        record,
        record_id=record.record_id + "+aug",
        image=image,
        mask=(mask >= 0.5).astype(np.uint8),
    )


def ordinary_augment(record: DatasetRecord, rng: np.random.Generator) -> DatasetRecord:
    """Random flip / rotation / shift / brightness, drawn from `rng`."""
    return apply_augment(record, AugmentParams.draw(rng))
