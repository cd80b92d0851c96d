"""Stack loading, synthetic stack generation, and slice normalization.

A dataset is an ordered list of grayscale slices, each optionally carrying a
binary region-of-interest mask (where pathology may occur) and a binary
annotation (where pathology does occur). Real stacks come in through a CSV
manifest; desk-scale experiments use the deterministic synthetic generator.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .errors import ConfigError, LoadError, ValidationError
from .imageops import resize_bilinear, resize_nearest

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["stack_id", "slice_index", "image_path", "roi_mask_path", "annotation_path", "split"]
SPLITS = ("pool", "test")

# Fraction of synthetic slices that receive extra blur / noise / contrast
# damage so the quality metrics have something to separate.
DEGRADED_FRACTION = 0.3


@dataclass
class SliceRecord:
    """One grayscale slice of a 3D stack, values in [0, 1]."""

    stack_id: str
    slice_index: int
    image: np.ndarray
    roi_mask: np.ndarray | None = None
    annotation: np.ndarray | None = None
    split: str = "pool"

    @property
    def key(self) -> tuple[str, int]:
        return (self.stack_id, self.slice_index)

    def roi_or_full(self) -> np.ndarray:
        """ROI mask, defaulting to all-ones when none was provided."""
        if self.roi_mask is None:
            return np.ones(self.image.shape, dtype=np.uint8)
        return self.roi_mask


@dataclass
class StackDataset:
    """Ordered slice collection; image_size is the common square side, if any."""

    records: list[SliceRecord] = field(default_factory=list)
    image_size: int | None = None

    def by_key(self) -> dict[tuple[str, int], SliceRecord]:
        return {r.key: r for r in self.records}

    def pool(self) -> list[SliceRecord]:
        return [r for r in self.records if r.split == "pool"]

    def test(self) -> list[SliceRecord]:
        return [r for r in self.records if r.split == "test"]

    def stack_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.stack_id, None)
        return list(seen)


@dataclass
class SyntheticSpec:
    """Parameters of the deterministic synthetic stack generator."""

    n_stacks: int = 3
    slices_per_stack: int = 60
    image_size: int = 64
    lesion_count_range: tuple[int, int] = (1, 2)
    lesion_radius_range: tuple[int, int] = (10, 15)
    blur_sigma_range: tuple[float, float] = (0.25, 0.6)
    contrast_range: tuple[float, float] = (0.75, 0.95)
    noise_level: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.n_stacks < 1 or self.slices_per_stack < 1:
            raise ValidationError("n_stacks and slices_per_stack must be positive")
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        for name in ("lesion_count_range", "lesion_radius_range", "blur_sigma_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValidationError(f"{name} is empty: ({lo}, {hi})")
        if self.lesion_count_range[0] < 0 or self.lesion_radius_range[0] < 1:
            raise ValidationError("lesion counts must be >= 0 and radii >= 1")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be non-negative")


def validate_record(record: SliceRecord) -> None:
    """Check the slice invariants: shared shapes, binary masks, annotation inside ROI."""
    img = record.image
    if img.ndim != 2:
        raise ValidationError(f"{record.key}: image must be 2-D, got shape {img.shape}")
    for name in ("roi_mask", "annotation"):
        mask = getattr(record, name)
        if mask is None:
            continue
        if mask.shape != img.shape:
            raise ValidationError(
                f"{record.stack_id}/{record.slice_index}: {name} shape {mask.shape} "
                f"!= image shape {img.shape}"
            )
        values = np.unique(mask)
        if not np.isin(values, (0, 1)).all():
            raise ValidationError(f"{record.stack_id}/{record.slice_index}: {name} is not binary")
    if record.annotation is not None and record.roi_mask is not None:
        if np.any((record.annotation == 1) & (record.roi_mask == 0)):
            raise ValidationError(
                f"{record.stack_id}/{record.slice_index}: annotation extends outside the ROI"
            )
    if record.split not in SPLITS:
        raise ValidationError(f"{record.key}: split must be one of {SPLITS}")


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------

def _read_gray(path: Path) -> np.ndarray:
    if not path.is_file():
        raise LoadError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def _read_mask(path: Path, what: str, key: tuple[str, int]) -> np.ndarray:
    if not path.is_file():
        raise LoadError(f"missing {what} file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.int64)
    values = set(np.unique(arr).tolist())
    if values <= {0, 255}:
        return (arr // 255).astype(np.uint8)
    if values <= {0, 1}:
        return arr.astype(np.uint8)
    raise ValidationError(f"{key[0]}/{key[1]}: {what} {path} has non-binary values {sorted(values)[:6]}")


def load_manifest(path: str | Path) -> StackDataset:
    """Load a dataset from a CSV manifest; see the README for the schema.

    Empty cells mean an absent mask/annotation/split. A missing ROI mask is
    treated as all-ones; annotations are clipped to the ROI support (with a
    warning) so the containment invariant always holds after loading.
    """
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"missing manifest file: {path}")
    base = path.parent
    records: list[SliceRecord] = []
    seen: set[tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_COLUMNS:
            raise ValidationError(
                f"manifest {path} must have header {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}"
            )
        for row in reader:
            stack_id = row["stack_id"].strip()
            try:
                slice_index = int(row["slice_index"])
            except ValueError as exc:
                raise ValidationError(f"bad slice_index {row['slice_index']!r} in {path}") from exc
            if slice_index < 0:
                raise ValidationError(f"{stack_id}: negative slice_index {slice_index}")
            key = (stack_id, slice_index)
            if key in seen:
                raise ValidationError(f"duplicate slice {stack_id}/{slice_index} in manifest")
            seen.add(key)

            image = _read_gray(base / row["image_path"].strip())
            roi = None
            if row["roi_mask_path"].strip():
                roi = _read_mask(base / row["roi_mask_path"].strip(), "roi_mask", key)
                if roi.shape != image.shape:
                    raise ValidationError(
                        f"{stack_id}/{slice_index}: roi_mask shape {roi.shape} != image shape {image.shape}"
                    )
            annotation = None
            if row["annotation_path"].strip():
                annotation = _read_mask(base / row["annotation_path"].strip(), "annotation", key)
                if annotation.shape != image.shape:
                    raise ValidationError(
                        f"{stack_id}/{slice_index}: annotation shape {annotation.shape} "
                        f"!= image shape {image.shape}"
                    )
                support = roi if roi is not None else np.ones_like(annotation)
                outside = (annotation == 1) & (support == 0)
                if outside.any():
                    logger.warning(
                        "%s/%d: zeroing %d annotation pixels outside the ROI",
                        stack_id, slice_index, int(outside.sum()),
                    )
                    annotation = annotation * support
            split = row["split"].strip() or "pool"
            record = SliceRecord(stack_id, slice_index, image, roi, annotation, split)
            validate_record(record)
            records.append(record)

    sizes = {r.image.shape for r in records}
    image_size = None
    if len(sizes) == 1:
        h, w = next(iter(sizes))
        if h == w:
            image_size = h
    return StackDataset(records=records, image_size=image_size)


def write_manifest(dataset: StackDataset, out_dir: str | Path, spec: SyntheticSpec | None = None) -> Path:
    """Write a dataset as 8-bit grayscale PNGs plus a manifest.csv.

    Returns the manifest path. When `spec` is given, an echo of it is stored
    as spec.json next to the manifest.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    rows = []
    for r in dataset.records:
        stem = f"{r.stack_id}_{r.slice_index:04d}"
        img_rel = f"images/{stem}.png"
        _save_gray(out_dir / img_rel, r.image)
        roi_rel = ""
        if r.roi_mask is not None:
            roi_rel = f"images/{stem}_roi.png"
            _save_mask(out_dir / roi_rel, r.roi_mask)
        ann_rel = ""
        if r.annotation is not None:
            ann_rel = f"images/{stem}_ann.png"
            _save_mask(out_dir / ann_rel, r.annotation)
        rows.append([r.stack_id, str(r.slice_index), img_rel, roi_rel, ann_rel, r.split])
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    if spec is not None:
        with open(out_dir / "spec.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(spec), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest_path


def _save_gray(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return ((((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2) <= 1.0).astype(np.uint8)


def rasterize_lesion(size: int, cy: int, cx: int, ry: int, rx: int) -> np.ndarray:
    """Axis-aligned integer-centered ellipse; the unit the generator draws lesions in."""
    return _ellipse_mask(size, float(cy), float(cx), float(ry), float(rx))


def generate_synthetic_stack(spec: SyntheticSpec) -> StackDataset:
    """Generate deterministic synthetic stacks with elliptical ROIs and lesion blobs.

    Each slice draws its own focus / noise / brightness latents from a
    per-slice seed substream; a DEGRADED_FRACTION share of slices receives
    extra damage (blur and/or noise-plus-contrast-compression, as two
    independent modes). Identical specs, seed included, produce bit-identical
    datasets.
    """
    spec.validate()
    size = spec.image_size
    records: list[SliceRecord] = []
    for s in range(spec.n_stacks):
        stack_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, s]))
        stack_id = f"synthetic-{s:02d}"
        roi_cy = size * stack_rng.uniform(0.47, 0.53)
        roi_cx = size * stack_rng.uniform(0.47, 0.53)
        roi_ay = size * stack_rng.uniform(0.36, 0.42)
        roi_ax = size * stack_rng.uniform(0.40, 0.46)
        for j in range(spec.slices_per_stack):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, s, j]))
            depth = (j + 0.5) / spec.slices_per_stack
            scale = 0.88 + 0.12 * np.sin(np.pi * depth)
            record = _render_slice(
                spec, stack_id, j, rng,
                roi_cy, roi_cx, roi_ay * scale, roi_ax * scale,
            )
            records.append(record)
    return StackDataset(records=records, image_size=size)


def _render_slice(
    spec: SyntheticSpec,
    stack_id: str,
    index: int,
    rng: np.random.Generator,
    roi_cy: float,
    roi_cx: float,
    roi_ay: float,
    roi_ax: float,
) -> SliceRecord:
    size = spec.image_size
    roi = _ellipse_mask(size, roi_cy, roi_cx, roi_ay, roi_ax)

    # Smooth textured background inside the ROI.
    texture = ndi.gaussian_filter(rng.standard_normal((size, size)), sigma=max(2.0, size / 16))
    spread = texture.std()
    if spread > 0:
        texture = texture / spread
    image = 0.45 + 0.12 * texture

    # Lesion blobs: axis-aligned ellipses with integer centers and radii,
    # fully contained in the ROI so the annotated area is never clipped.
    annotation = np.zeros((size, size), dtype=np.uint8)
    count = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    placed = 0
    attempts = 0
    while placed < count and attempts < 200:
        attempts += 1
        ry = int(rng.integers(spec.lesion_radius_range[0], spec.lesion_radius_range[1] + 1))
        rx = int(rng.integers(spec.lesion_radius_range[0], spec.lesion_radius_range[1] + 1))
        inner_ay = roi_ay - ry - 1
        inner_ax = roi_ax - rx - 1
        if inner_ay <= 1 or inner_ax <= 1:
            continue
        theta = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform())
        cy = int(round(roi_cy + rad * inner_ay * np.sin(theta)))
        cx = int(round(roi_cx + rad * inner_ax * np.cos(theta)))
        lesion = rasterize_lesion(size, cy, cx, ry, rx)
        if np.any(lesion & (1 - roi)):
            continue
        annotation |= lesion
        bump = ndi.gaussian_filter(lesion.astype(np.float64), sigma=0.8)
        peak = bump.max()
        if peak > 0:
            image = image + (0.38 + 0.07 * rng.uniform()) * (bump / peak)
        placed += 1
    if placed < count:
        raise ValidationError(
            f"{stack_id}/{index}: could not place {count} lesions of radius "
            f"{spec.lesion_radius_range} inside the ROI; shrink the lesions or grow the image"
        )

    # Per-slice acquisition latents, drawn independently so the two quality
    # axes (focus, noise/contrast) vary independently across the stack. The
    # two damage modes are independent as well (combined incidence equals
    # DEGRADED_FRACTION), keeping the quadrant structure from collapsing
    # into a single correlated axis.
    mode_p = 1.0 - np.sqrt(1.0 - DEGRADED_FRACTION)
    focus_sigma = rng.uniform(0.35, 1.3)
    noise_sigma = spec.noise_level * rng.uniform(0.4, 1.8)
    gain = rng.uniform(0.85, 1.0)
    if rng.uniform() < mode_p:
        focus_sigma += rng.uniform(*spec.blur_sigma_range)
    if rng.uniform() < mode_p:
        noise_sigma *= 1.5
        gain *= rng.uniform(*spec.contrast_range)

    image = ndi.gaussian_filter(image, sigma=focus_sigma)
    image = image * gain
    image = image + noise_sigma * rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0) * roi
    annotation &= roi

    record = SliceRecord(stack_id, index, image, roi, annotation, "pool")
    validate_record(record)
    return record


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_slice(record: SliceRecord, size: int) -> SliceRecord:
    """Mask the image by its ROI, then resize everything to size x size.

    Intensities are resized bilinearly; both masks use nearest-neighbor so
    they stay binary and the annotation stays inside the ROI.
    """
    if size < 16:
        raise ConfigError(f"target size must be >= 16, got {size}")
    validate_record(record)
    roi = record.roi_or_full()
    image = record.image * roi
    image = np.clip(resize_bilinear(image, size, size), 0.0, 1.0)
    roi_resized = resize_nearest(roi, size, size).astype(np.uint8)
    annotation = None
    if record.annotation is not None:
        annotation = resize_nearest(record.annotation, size, size).astype(np.uint8)
    out = SliceRecord(record.stack_id, record.slice_index, image, roi_resized, annotation, record.split)
    validate_record(out)
    return out


def normalize_dataset(dataset: StackDataset, size: int) -> StackDataset:
    records = [normalize_slice(r, size) for r in dataset.records]
    return StackDataset(records=records, image_size=size)


def assign_test_split(dataset: StackDataset, test_fraction: float) -> StackDataset:
    """Tag an evenly spaced share of each stack's slices as the test split.

    No-op if the dataset already contains test records. The stride pattern is
    deterministic, so the held-out set never depends on any RNG state.
    """
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if any(r.split == "test" for r in dataset.records):
        return dataset
    stride = max(2, round(1.0 / test_fraction))
    records: list[SliceRecord] = []
    position: dict[str, int] = {}
    for r in dataset.records:
        p = position.get(r.stack_id, 0)
        position[r.stack_id] = p + 1
        split = "test" if p % stride == stride // 2 else "pool"
        records.append(SliceRecord(r.stack_id, r.slice_index, r.image, r.roi_mask, r.annotation, split))
    return StackDataset(records=records, image_size=dataset.image_size)
