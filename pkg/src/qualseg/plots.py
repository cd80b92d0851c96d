"""Plot generation from persisted CSV artifacts, so figures are re-runnable offline."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .quality import read_quality_csv, stack_thresholds
from .training import read_loss_csv


def quality_scatter(quality_csv: str | Path, out_png: str | Path) -> Path:
    """Blurriness vs inverse-PSNR scatter per stack, selected quadrant shaded."""
    scores, selected = read_quality_csv(quality_csv)
    chosen = set(selected)
    thresholds = stack_thresholds(scores)
    stacks = sorted({k[0] for k in scores})
    fig, axes = plt.subplots(1, len(stacks), figsize=(4.2 * len(stacks), 3.6), squeeze=False)
    for ax, stack in zip(axes[0], stacks):
        keys = [k for k in scores if k[0] == stack and math.isfinite(scores[k].blurriness)]
        xs = [scores[k].blurriness for k in keys]
        ys = [scores[k].psnr_inv for k in keys]
        picked = [k in chosen for k in keys]
        ax.scatter([x for x, p in zip(xs, picked) if not p], [y for y, p in zip(ys, picked) if not p],
                   s=14, c="tab:gray", label="rest")
        ax.scatter([x for x, p in zip(xs, picked) if p], [y for y, p in zip(ys, picked) if p],
                   s=18, c="tab:green", label="initial set")
        if stack in thresholds:
            mb, mp = thresholds[stack]
            ax.axvline(mb, color="tab:red", lw=0.8)
            ax.axhline(mp, color="tab:red", lw=0.8)
            ax.axvspan(min(xs + [mb]) if xs else 0, mb, ymax=_axis_frac(ys, mp), color="tab:green", alpha=0.08)
        ax.set_title(stack)
        ax.set_xlabel("blurriness")
        ax.set_ylabel("inverse PSNR")
    axes[0][0].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def _axis_frac(values: list[float], threshold: float) -> float:
    if not values:
        return 0.5
    lo, hi = min(values + [threshold]), max(values + [threshold])
    if hi <= lo:
        return 0.5
    return max(0.0, min(1.0, (threshold - lo) / (hi - lo)))


def loss_curves(loss_csv: str | Path, out_png: str | Path) -> Path:
    """Per-level training loss curves over epochs."""
    history = read_loss_csv(loss_csv)
    epochs = range(1, len(history.combined) + 1)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, color in (("l1", "tab:blue"), ("l2", "tab:orange"), ("l3", "tab:green"), ("l4", "tab:red")):
        ax.plot(epochs, getattr(history, name), color=color, label=f"level {name[1]}")
    ax.plot(epochs, history.combined, color="black", ls="--", lw=1.0, label="combined")
    ax.set_xlabel("epoch")
    ax.set_ylabel("dice loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
