"""Dice loss, paired augmentation, and the deep-supervised training loop.

The loss for one map is the negative smoothed dice overlap,

    -(2 * sum(P * Y)) / (sum(P) + sum(Y) + 1),

so it lives in (-1, 0] and is exactly 0 when prediction and target are
disjoint (including the all-empty case). Training minimizes the mean of this
loss over the four supervision heads, with the reduced heads upsampled to
input resolution before comparison; the ground truth is never downsampled.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.ndimage as ndi
import torch

from .data import SliceRecord
from .errors import ShapeError, TrainingError, ValidationError
from .model import SegModel, resize_to_input

LEVEL_NAMES = ("l1", "l2", "l3", "l4")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 60
    batch_size: int = 20
    rotation_range: float = 0.2   # radians
    shift_range: float = 0.2      # fraction of the side length
    shear_range: float = 0.2
    horizontal_flip: bool = True  # vertical flipping is never applied
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class LossHistory:
    """Per-epoch mean loss for each supervision level plus their combination."""

    l1: list[float] = field(default_factory=list)
    l2: list[float] = field(default_factory=list)
    l3: list[float] = field(default_factory=list)
    l4: list[float] = field(default_factory=list)
    combined: list[float] = field(default_factory=list)

    def append(self, per_level: dict[str, float], combined: float) -> None:
        for name in LEVEL_NAMES:
            getattr(self, name).append(per_level[name])
        self.combined.append(combined)

    def as_dict(self) -> dict[str, list[float]]:
        return {name: list(getattr(self, name)) for name in LEVEL_NAMES + ("combined",)}


def dice_loss(pred, target) -> torch.Tensor:
    """Negative smoothed dice between a probability map and a binary map.

    Accepts arrays or tensors of the same shape; the computation keeps the
    prediction's floating dtype and returns a 0-dim tensor.
    """
    p = torch.as_tensor(pred)
    y = torch.as_tensor(target, dtype=p.dtype)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")
    intersection = (p * y).sum()
    return -(2.0 * intersection) / (p.sum() + y.sum() + 1.0)


def _batch_dice(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sample dice loss."""
    p = pred.flatten(1)
    y = target.flatten(1)
    num = 2.0 * (p * y).sum(dim=1)
    den = p.sum(dim=1) + y.sum(dim=1) + 1.0
    return (-num / den).mean()


# ---------------------------------------------------------------------------
# Paired affine augmentation
# ---------------------------------------------------------------------------

@dataclass
class AffineParams:
    rotation: float = 0.0
    shear: float = 0.0
    shift_rows: float = 0.0
    shift_cols: float = 0.0
    hflip: bool = False


def sample_affine_params(rng: np.random.Generator, config: TrainConfig, size: int) -> AffineParams:
    return AffineParams(
        rotation=rng.uniform(-config.rotation_range, config.rotation_range),
        shear=rng.uniform(-config.shear_range, config.shear_range),
        shift_rows=rng.uniform(-config.shift_range, config.shift_range) * size,
        shift_cols=rng.uniform(-config.shift_range, config.shift_range) * size,
        hflip=bool(config.horizontal_flip and rng.random() < 0.5),
    )


def apply_affine(image: np.ndarray, annotation: np.ndarray, params: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply one affine transform identically to an image and its annotation.

    The image is sampled bilinearly, the annotation with nearest-neighbor so
    it stays binary; both are padded with zeros. A zero-parameter transform is
    an exact identity.
    """
    if image.shape != annotation.shape:
        raise ShapeError(f"image shape {image.shape} != annotation shape {annotation.shape}")
    h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])

    cos, sin = np.cos(params.rotation), np.sin(params.rotation)
    rot = np.array([[cos, -sin], [sin, cos]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    flip = np.diag([1.0, -1.0 if params.hflip else 1.0])
    matrix = rot @ shear @ flip
    shift = np.array([params.shift_rows, params.shift_cols])

    inverse = np.linalg.inv(matrix)
    offset = center - inverse @ (center + shift)
    out_image = ndi.affine_transform(
        np.asarray(image, dtype=np.float64), inverse, offset=offset,
        order=1, mode="constant", cval=0.0, prefilter=False,
    )
    out_ann = ndi.affine_transform(
        np.asarray(annotation, dtype=np.uint8), inverse, offset=offset,
        order=0, mode="constant", cval=0,
    )
    return out_image, out_ann.astype(np.uint8)


def augment(image: np.ndarray, annotation: np.ndarray, seed: int, config: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw one random affine transform from `seed` and apply it to the pair."""
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    params = sample_affine_params(rng, config, size=image.shape[0])
    return apply_affine(image, annotation, params)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(
    model: SegModel,
    records: list[SliceRecord],
    config: TrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[SegModel, LossHistory]:
    """Train in place on annotated records; returns the model and loss history.

    Mini-batches are reshuffled and re-augmented every epoch. All randomness
    (shuffling, augmentation, dropout) derives from config.seed, so repeated
    runs produce bitwise-identical parameters on the same machine.
    """
    config.validate()
    if not records:
        raise ValidationError("training needs at least one record")
    missing = [r.key for r in records if r.annotation is None]
    if missing:
        raise ValidationError(f"records without annotation cannot be trained on: {missing[:8]}")
    size = model.config.input_size
    for r in records:
        if r.image.shape != (size, size):
            raise ShapeError(f"record {r.key} has shape {r.image.shape}, model expects {(size, size)}")

    images = [np.asarray(r.image, dtype=np.float64) for r in records]
    annotations = [np.asarray(r.annotation, dtype=np.uint8) for r in records]
    n = len(records)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = LossHistory()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        aug_seeds = rng.integers(0, 2**31, size=n)
        level_sums = {name: 0.0 for name in LEVEL_NAMES}
        model.train()
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            chunk = order[start:start + config.batch_size]
            xs, ys = [], []
            for k in chunk:
                img, ann = augment(images[k], annotations[k], int(aug_seeds[k]), config)
                xs.append(img)
                ys.append(ann)
            x = torch.from_numpy(np.stack(xs).astype(np.float32)).unsqueeze(1)
            y = torch.from_numpy(np.stack(ys).astype(np.float32)).unsqueeze(1)

            heads = model(x)
            losses = [_batch_dice(resize_to_input(head, size), y) for head in heads]
            combined = torch.stack(losses).mean()
            if not torch.isfinite(combined):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")
            optimizer.zero_grad()
            combined.backward()
            optimizer.step()

            for name, value in zip(LEVEL_NAMES, losses):
                level_sums[name] += float(value.detach()) * len(chunk)

        per_level = {name: level_sums[name] / n for name in LEVEL_NAMES}
        epoch_combined = sum(per_level.values()) / len(LEVEL_NAMES)
        history.append(per_level, epoch_combined)
        if progress is not None:
            progress(epoch, epoch_combined)

    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    pred: np.ndarray,
    target: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between the analytic gradient of loss_fn w.r.t. the
    prediction and central finite differences with the given step."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64)).clone().requires_grad_(True)
    y = torch.as_tensor(np.asarray(target, dtype=np.float64))
    analytic = torch.autograd.grad(loss_fn(p, y), p)[0].detach().numpy()

    base = np.asarray(pred, dtype=np.float64)
    numeric = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    with torch.no_grad():
        while not it.finished:
            idx = it.multi_index
            plus = base.copy()
            minus = base.copy()
            plus[idx] += step
            minus[idx] -= step
            up = float(loss_fn(torch.as_tensor(plus), y))
            down = float(loss_fn(torch.as_tensor(minus), y))
            numeric[idx] = (up - down) / (2.0 * step)
            it.iternext()

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


# ---------------------------------------------------------------------------
# Loss-history CSV
# ---------------------------------------------------------------------------

LOSS_CSV_COLUMNS = ["epoch", "l1", "l2", "l3", "l4", "combined"]


def write_loss_csv(path: str | Path, history: LossHistory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_COLUMNS)
        for e in range(len(history.combined)):
            writer.writerow([
                e + 1,
                repr(history.l1[e]), repr(history.l2[e]),
                repr(history.l3[e]), repr(history.l4[e]),
                repr(history.combined[e]),
            ])


def read_loss_csv(path: str | Path) -> LossHistory:
    history = LossHistory()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            history.append(
                {name: float(row[name]) for name in LEVEL_NAMES},
                float(row["combined"]),
            )
    return history
