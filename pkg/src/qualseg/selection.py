"""Minimal-training-set detection from head disagreement.

After an initial round of training, each unannotated pool slice gets a score
q: the Jaccard overlap between the binarized level-3 output (upsampled to
input resolution) and the binarized level-4 output. Slices where the two
heads disagree (q below the gate q0) carry content the model has not learned
yet and are queued for annotation and fine-tuning.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SliceRecord
from .errors import ConfigError, ShapeError
from .model import LevelOutputs, SegModel, forward, resize_outputs

DEFAULT_Q0 = 0.9
BINARIZE_THRESHOLD = 0.5
# q0 slightly above 1 is allowed so "select everything" is expressible.
MAX_Q0 = 1.5


@dataclass
class QualityVerdict:
    stack_id: str
    slice_index: int
    q: float
    selected: bool
    q0_used: float

    @property
    def key(self) -> tuple[str, int]:
        return (self.stack_id, self.slice_index)


@dataclass
class SelectionReport:
    q0: float
    s0: list[tuple[str, int]] = field(default_factory=list)
    s_m: list[tuple[str, int]] = field(default_factory=list)
    verdicts: list[QualityVerdict] = field(default_factory=list)
    fraction_selected: float = 0.0

    def to_json(self) -> str:
        payload = {
            "q0": self.q0,
            "s0": [[s, i] for s, i in self.s0],
            "s_m": [[s, i] for s, i in self.s_m],
            "verdicts": [
                {"stack_id": v.stack_id, "slice_index": v.slice_index, "q": v.q, "selected": v.selected}
                for v in self.verdicts
            ],
            "fraction_selected": self.fraction_selected,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        data = json.loads(text)
        return cls(
            q0=data["q0"],
            s0=[(s, int(i)) for s, i in data["s0"]],
            s_m=[(s, int(i)) for s, i in data["s_m"]],
            verdicts=[
                QualityVerdict(v["stack_id"], int(v["slice_index"]), float(v["q"]), bool(v["selected"]), data["q0"])
                for v in data["verdicts"]
            ],
            fraction_selected=data["fraction_selected"],
        )


def write_report(path: str | Path, report: SelectionReport) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def read_report(path: str | Path) -> SelectionReport:
    return SelectionReport.from_json(Path(path).read_text(encoding="utf-8"))


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary maps; 1.0 when both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def quality_from_outputs(outputs: LevelOutputs) -> float:
    """Agreement score: Jaccard of the binarized resized level-3 and level-4 maps."""
    if outputs.l3r is None:
        outputs = resize_outputs(outputs)
    m3 = outputs.l3r >= BINARIZE_THRESHOLD
    m4 = outputs.l4 >= BINARIZE_THRESHOLD
    return jaccard(m3, m4)


def quality_score(model: SegModel, image: np.ndarray) -> float:
    """Forward one image and score the level-3 / level-4 agreement."""
    outputs = forward(model, np.asarray(image)[None])[0]
    return quality_from_outputs(outputs)


def verdict_for(key: tuple[str, int], q: float, q0: float) -> QualityVerdict:
    return QualityVerdict(key[0], key[1], q, selected=q < q0, q0_used=q0)


def select_minimal(
    model: SegModel,
    records: list[SliceRecord],
    q0: float = DEFAULT_Q0,
) -> tuple[list[QualityVerdict], list[tuple[str, int]]]:
    """Score every record and return (verdicts, selected keys).

    A record is selected iff its q is strictly below q0, so q0 = 0 selects
    nothing and q0 > 1 selects everything. Slices are scored one at a time,
    which makes the verdicts independent of pool ordering.
    """
    if not 0.0 <= q0 <= MAX_Q0:
        raise ConfigError(f"q0 must be in [0, {MAX_Q0}], got {q0}")
    if not records:
        raise ConfigError("select_minimal needs a non-empty pool")
    verdicts = [verdict_for(r.key, quality_score(model, r.image), q0) for r in records]
    return verdicts, [v.key for v in verdicts if v.selected]
