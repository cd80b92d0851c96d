"""Unsupervised slice-quality metrics and the two-stage initial selection.

Four no-reference scores drive the selection: blurriness (inverse variance of
the Laplacian response), inverse PSNR (median-residual variance over peak
intensity), and the ROI coefficient of variation / mean. Slices below the
per-stack mean on both blurriness and inverse PSNR form the initial training
candidates; a greedy feature-space deduplication then trims near-duplicates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .data import SliceRecord
from .errors import ConfigError, ValidationError

# Sentinel for a constant image (zero Laplacian variance). Kept out of all
# mean computations; a slice carrying it is never selected.
BLURRINESS_MAX = math.inf

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

DEFAULT_MEDIAN_KERNEL = 5
DEFAULT_DEDUP_EPS = 0.25
DEFAULT_STACK_CAP = 10
MIN_CANDIDATES_FOR_DEDUP = 5


@dataclass
class QualityScores:
    """Per-slice quality metrics; roi fields are None when the ROI is empty."""

    blurriness: float
    psnr_inv: float
    roi_cov: float | None = None
    roi_mean: float | None = None


@dataclass
class InitialSelection:
    """Result of quadrant thresholding plus deduplication, across all stacks."""

    s0_indices: list[tuple[str, int]]
    thresholds_used: dict[str, tuple[float, float]] = field(default_factory=dict)
    eliminated_by_dedup: list[tuple[str, int]] = field(default_factory=list)


def blurriness(image: np.ndarray) -> float:
    """Inverse variance of the 3x3 Laplacian response (replicate-padded).

    Higher means less in-focus. A constant image has zero response variance
    and returns BLURRINESS_MAX.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValidationError(f"blurriness needs an image of at least 3x3, got shape {img.shape}")
    response = ndi.convolve(img, LAPLACIAN_KERNEL, mode="nearest")
    variance = float(response.var())
    if variance == 0.0:
        return BLURRINESS_MAX
    return 1.0 / variance


def psnr_inv(image: np.ndarray, median_kernel: int = DEFAULT_MEDIAN_KERNEL) -> float:
    """Variance of (image - median_filter(image)) over the image maximum.

    High values flag speckly, low-contrast foregrounds. An all-black image
    scores 0 (it is flagged as low quality elsewhere).
    """
    if median_kernel % 2 == 0 or median_kernel < 3:
        raise ConfigError(f"median kernel must be odd and >= 3, got {median_kernel}")
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValidationError("psnr_inv needs a non-empty image")
    peak = float(img.max())
    if peak == 0.0:
        return 0.0
    residual = img - ndi.median_filter(img, size=median_kernel, mode="nearest")
    return float(residual.var()) / peak


def roi_stats(image: np.ndarray, roi_mask: np.ndarray) -> tuple[float, float]:
    """(coefficient of variation, mean) over the ROI pixels."""
    img = np.asarray(image, dtype=np.float64)
    mask = np.asarray(roi_mask)
    if mask.shape != img.shape:
        raise ValidationError(f"roi_mask shape {mask.shape} != image shape {img.shape}")
    pixels = img[mask == 1]
    if pixels.size == 0:
        raise ValidationError("roi_stats needs at least one foreground ROI pixel")
    peak = float(pixels.max())
    cov = 0.0 if peak == 0.0 else float(pixels.var()) / peak
    return cov, float(pixels.mean())


def score_slice(record: SliceRecord, median_kernel: int = DEFAULT_MEDIAN_KERNEL) -> QualityScores:
    roi = record.roi_or_full()
    cov = mean = None
    if np.any(roi == 1):
        cov, mean = roi_stats(record.image, roi)
    return QualityScores(
        blurriness=blurriness(record.image),
        psnr_inv=psnr_inv(record.image, median_kernel),
        roi_cov=cov,
        roi_mean=mean,
    )


def score_records(
    records: list[SliceRecord], median_kernel: int = DEFAULT_MEDIAN_KERNEL
) -> dict[tuple[str, int], QualityScores]:
    return {r.key: score_slice(r, median_kernel) for r in records}


def select_initial(scores: dict[tuple[str, int], QualityScores]) -> list[tuple[str, int]]:
    """Slices strictly below the per-stack mean on both blurriness and psnr_inv.

    Blurriness means are taken over finite values only; sentinel slices are
    never selected. Strict inequality makes the all-equal case empty.
    """
    if not scores:
        raise ValidationError("select_initial needs at least one scored slice")
    selected: list[tuple[str, int]] = []
    for stack_id, keys in _group_by_stack(scores):
        finite_blur = [scores[k].blurriness for k in keys if math.isfinite(scores[k].blurriness)]
        if not finite_blur:
            continue
        mean_blur = sum(finite_blur) / len(finite_blur)
        mean_psnr = sum(scores[k].psnr_inv for k in keys) / len(keys)
        for k in keys:
            s = scores[k]
            if math.isfinite(s.blurriness) and s.blurriness < mean_blur and s.psnr_inv < mean_psnr:
                selected.append(k)
    return selected


def stack_thresholds(scores: dict[tuple[str, int], QualityScores]) -> dict[str, tuple[float, float]]:
    """Per-stack (mean finite blurriness, mean psnr_inv) used by select_initial."""
    out: dict[str, tuple[float, float]] = {}
    for stack_id, keys in _group_by_stack(scores):
        finite_blur = [scores[k].blurriness for k in keys if math.isfinite(scores[k].blurriness)]
        if not finite_blur:
            continue
        out[stack_id] = (
            sum(finite_blur) / len(finite_blur),
            sum(scores[k].psnr_inv for k in keys) / len(keys),
        )
    return out


def _group_by_stack(
    scores: dict[tuple[str, int], QualityScores]
) -> list[tuple[str, list[tuple[str, int]]]]:
    groups: dict[str, list[tuple[str, int]]] = {}
    for key in scores:
        groups.setdefault(key[0], []).append(key)
    return [(stack, sorted(keys, key=lambda k: k[1])) for stack, keys in groups.items()]


def dedup_epsilon(
    candidates: list[tuple[str, int]],
    scores: dict[tuple[str, int], QualityScores],
    eps0: float = DEFAULT_DEDUP_EPS,
    cap: int = DEFAULT_STACK_CAP,
) -> list[tuple[str, int]]:
    """Greedy near-duplicate elimination in normalized (roi_cov, roi_mean) space.

    Candidates are visited in ascending blurriness order (sharpest first); a
    candidate survives iff its Euclidean distance to every survivor so far
    exceeds eps0. At most `cap` survivors are kept.
    """
    if eps0 < 0:
        raise ConfigError(f"eps0 must be >= 0, got {eps0}")
    if cap < 1:
        raise ConfigError(f"cap must be positive, got {cap}")
    if not candidates:
        return []
    for k in candidates:
        if scores[k].roi_cov is None or scores[k].roi_mean is None:
            raise ValidationError(f"candidate {k} has no ROI stats")

    features = np.array([[scores[k].roi_cov, scores[k].roi_mean] for k in candidates], dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    normalized = (features - mean) / std

    order = sorted(range(len(candidates)), key=lambda i: (scores[candidates[i]].blurriness, candidates[i]))
    kept: list[int] = []
    for i in order:
        dists = [float(np.linalg.norm(normalized[i] - normalized[j])) for j in kept]
        if all(d > eps0 for d in dists):
            kept.append(i)
    kept = kept[:cap]
    kept_keys = {candidates[i] for i in kept}
    # Preserve the dataset's slice order in the result.
    return [k for k in candidates if k in kept_keys]


def build_initial_selection(
    scores: dict[tuple[str, int], QualityScores],
    eps0: float = DEFAULT_DEDUP_EPS,
    cap: int = DEFAULT_STACK_CAP,
) -> InitialSelection:
    """Quadrant thresholding then per-stack deduplication.

    Dedup is skipped for stacks with fewer than MIN_CANDIDATES_FOR_DEDUP
    survivors; slices without ROI stats never enter the initial set.
    """
    quadrant = [k for k in select_initial(scores) if scores[k].roi_cov is not None]
    thresholds = stack_thresholds(scores)
    s0: list[tuple[str, int]] = []
    eliminated: list[tuple[str, int]] = []
    by_stack: dict[str, list[tuple[str, int]]] = {}
    for k in quadrant:
        by_stack.setdefault(k[0], []).append(k)
    for stack_id in sorted(by_stack):
        cands = sorted(by_stack[stack_id], key=lambda k: k[1])
        if len(cands) < MIN_CANDIDATES_FOR_DEDUP:
            s0.extend(cands)
            continue
        kept = dedup_epsilon(cands, scores, eps0=eps0, cap=cap)
        s0.extend(kept)
        eliminated.extend(k for k in cands if k not in set(kept))
    return InitialSelection(s0_indices=s0, thresholds_used=thresholds, eliminated_by_dedup=eliminated)


# ---------------------------------------------------------------------------
# CSV round trip for the quality-scan artifact
# ---------------------------------------------------------------------------

QUALITY_CSV_COLUMNS = ["stack_id", "slice_index", "blurriness", "psnr_inv", "roi_cov", "roi_mean", "selected_s0"]


def write_quality_csv(
    path: str | Path,
    scores: dict[tuple[str, int], QualityScores],
    selected: list[tuple[str, int]],
) -> None:
    chosen = set(selected)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(QUALITY_CSV_COLUMNS)
        for key in sorted(scores):
            s = scores[key]
            writer.writerow([
                key[0],
                key[1],
                repr(s.blurriness) if math.isfinite(s.blurriness) else "inf",
                repr(s.psnr_inv),
                "" if s.roi_cov is None else repr(s.roi_cov),
                "" if s.roi_mean is None else repr(s.roi_mean),
                int(key in chosen),
            ])


def read_quality_csv(path: str | Path) -> tuple[dict[tuple[str, int], QualityScores], list[tuple[str, int]]]:
    scores: dict[tuple[str, int], QualityScores] = {}
    selected: list[tuple[str, int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["stack_id"], int(row["slice_index"]))
            scores[key] = QualityScores(
                blurriness=float(row["blurriness"]),
                psnr_inv=float(row["psnr_inv"]),
                roi_cov=float(row["roi_cov"]) if row["roi_cov"] else None,
                roi_mean=float(row["roi_mean"]) if row["roi_mean"] else None,
            )
            if row["selected_s0"] == "1":
                selected.append(key)
    return scores, selected
