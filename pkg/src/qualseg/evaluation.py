"""Segmentation metrics, the random-sampling baseline, and overlay rendering.

Predictions are the level-4 output binarized at 0.5. Aggregation over a test
set is the per-slice (macro) mean of each metric.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SliceRecord
from .errors import ShapeError, ValidationError
from .model import ModelConfig, SegModel, build_model, forward
from .training import TrainConfig, train

METRIC_NAMES = ("precision", "recall", "jaccard", "dice", "accuracy")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class Metrics:
    precision: float
    recall: float
    jaccard: float
    dice: float
    accuracy: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.precision, self.recall, self.jaccard, self.dice, self.accuracy)


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Pixelwise confusion counts between two binary maps."""
    p = np.asarray(pred)
    y = np.asarray(target)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    p = p != 0
    y = y != 0
    tp = int(np.logical_and(p, y).sum())
    fp = int(np.logical_and(p, ~y).sum())
    fn = int(np.logical_and(~p, y).sum())
    tn = int(np.logical_and(~p, ~y).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def metrics_from_counts(c: ConfusionCounts) -> Metrics:
    """Precision/recall/Jaccard/dice/accuracy with the empty-mask conventions.

    An empty prediction gets precision 1 only when the ground truth is also
    empty (and symmetrically for recall); two empty masks count as a perfect
    overlap.
    """
    if c.tp + c.fp == 0:
        precision = 1.0 if c.fn == 0 else 0.0
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall = 1.0 if c.fp == 0 else 0.0
    else:
        recall = c.tp / (c.tp + c.fn)
    denom = c.tp + c.fp + c.fn
    jaccard = 1.0 if denom == 0 else c.tp / denom
    dice = 1.0 if denom == 0 else 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    accuracy = (c.tp + c.tn) / c.total if c.total else 1.0
    return Metrics(precision, recall, jaccard, dice, accuracy)


def seg_metrics(pred: np.ndarray, target: np.ndarray) -> Metrics:
    return metrics_from_counts(confusion(pred, target))


def mean_metrics(per_slice: list[Metrics]) -> Metrics:
    if not per_slice:
        raise ValidationError("cannot average an empty metrics list")
    values = np.array([m.as_tuple() for m in per_slice], dtype=np.float64)
    return Metrics(*(float(v) for v in values.mean(axis=0)))


def predict_mask(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Final binary prediction: the level-4 output thresholded at 0.5."""
    outputs = forward(model, np.asarray(image)[None])[0]
    return (outputs.l4 >= 0.5).astype(np.uint8)


def evaluate_records(
    model: SegModel, records: list[SliceRecord]
) -> tuple[list[tuple[tuple[str, int], Metrics]], Metrics]:
    """Per-slice metrics on annotated records plus their macro mean."""
    missing = [r.key for r in records if r.annotation is None]
    if missing:
        raise ValidationError(f"evaluation needs annotations; missing for {missing[:8]}")
    if not records:
        raise ValidationError("evaluation needs at least one record")
    rows = []
    for r in records:
        rows.append((r.key, seg_metrics(predict_mask(model, r.image), r.annotation)))
    return rows, mean_metrics([m for _, m in rows])


# ---------------------------------------------------------------------------
# Random-sampling baseline
# ---------------------------------------------------------------------------

def random_baseline(
    records: list[SliceRecord],
    fraction: float,
    runs: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int = 0,
    eval_records: list[SliceRecord] | None = None,
) -> tuple[Metrics, list[dict]]:
    """Repeatedly train on a random fraction of the records and evaluate.

    Each run samples ceil(fraction * n) records without replacement, trains a
    fresh model, and evaluates on the unsampled remainder (or on
    `eval_records` when a fixed comparison split is wanted). Returns the mean
    metrics and one row per run.
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    if runs < 1:
        raise ValidationError(f"runs must be positive, got {runs}")
    missing = [r.key for r in records if r.annotation is None]
    if missing:
        raise ValidationError(f"baseline needs annotated records; missing for {missing[:8]}")
    n = len(records)
    k = math.ceil(fraction * n)
    if k >= n and eval_records is None:
        raise ValidationError(f"fraction {fraction} leaves no test records ({k} of {n} sampled)")
    if k < 1:
        raise ValidationError("fraction samples an empty training set")

    rows: list[dict] = []
    per_run: list[Metrics] = []
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
        chosen = set(rng.choice(n, size=k, replace=False).tolist())
        train_set = [records[i] for i in sorted(chosen)]
        held_out = eval_records if eval_records is not None else [
            records[i] for i in range(n) if i not in chosen
        ]
        model = build_model(model_config, seed=seed + 1000 + run)
        run_config = TrainConfig(**{**train_config.__dict__, "seed": seed + 2000 + run})
        train(model, train_set, run_config)
        _, mean = evaluate_records(model, held_out)
        per_run.append(mean)
        rows.append({
            "run": run,
            "n_train": k,
            **{name: getattr(mean, name) for name in METRIC_NAMES},
        })
    return mean_metrics(per_run), rows


# ---------------------------------------------------------------------------
# Overlay rendering
# ---------------------------------------------------------------------------

FN_COLOR = (255, 0, 0)     # missed pathology
FP_COLOR = (0, 0, 255)     # spurious prediction
TP_COLOR = (255, 0, 255)   # correctly predicted pathology


def render_overlay(pred: np.ndarray, target: np.ndarray, image: np.ndarray) -> np.ndarray:
    """RGB error overlay: red = false negative, blue = false positive,
    magenta = true positive, grayscale image elsewhere."""
    p = np.asarray(pred)
    y = np.asarray(target)
    img = np.asarray(image)
    if p.shape != y.shape or p.shape != img.shape:
        raise ShapeError(f"shapes differ: pred {p.shape}, target {y.shape}, image {img.shape}")
    p = p != 0
    y = y != 0
    gray = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[~p & y] = FN_COLOR
    rgb[p & ~y] = FP_COLOR
    rgb[p & y] = TP_COLOR
    return rgb


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

METRICS_CSV_COLUMNS = ["stack_id", "slice_index"] + list(METRIC_NAMES)


def write_metrics_csv(
    path: str | Path,
    per_slice: list[tuple[tuple[str, int], Metrics]],
    mean: Metrics,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_COLUMNS)
        for (stack_id, slice_index), m in per_slice:
            writer.writerow([stack_id, slice_index] + [repr(float(v)) for v in m.as_tuple()])
        writer.writerow(["MEAN", ""] + [repr(float(v)) for v in mean.as_tuple()])


BASELINE_CSV_COLUMNS = ["run", "n_train"] + list(METRIC_NAMES)


def write_baseline_csv(path: str | Path, rows: list[dict]) -> None:
    values = np.array([[row[name] for name in METRIC_NAMES] for row in rows], dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BASELINE_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row["run"], row["n_train"]] + [repr(float(row[name])) for name in METRIC_NAMES])
        writer.writerow(["MEAN", ""] + [repr(float(v)) for v in values.mean(axis=0)])
        writer.writerow(["STD", ""] + [repr(float(v)) for v in values.std(axis=0)])
