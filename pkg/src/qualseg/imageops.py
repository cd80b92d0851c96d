"""Low-level 2-D resampling helpers.

Both resizers use the half-pixel-center convention (output sample i maps to
source coordinate (i + 0.5) * in/out - 0.5), which matches the bilinear
upsampling used on the model's deep-supervision outputs.
"""
from __future__ import annotations

import numpy as np


def _source_coords(out_len: int, in_len: int) -> np.ndarray:
    scale = in_len / out_len
    return (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2-D array with bilinear interpolation (edge-clamped)."""
    src = np.asarray(image, dtype=np.float64)
    in_h, in_w = src.shape
    if (in_h, in_w) == (height, width):
        return src.copy()

    ys = np.clip(_source_coords(height, in_h), 0.0, in_h - 1)
    xs = np.clip(_source_coords(width, in_w), 0.0, in_w - 1)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = src[y0[:, None], x0[None, :]] * (1.0 - wx) + src[y0[:, None], x1[None, :]] * wx
    bot = src[y1[:, None], x0[None, :]] * (1.0 - wx) + src[y1[:, None], x1[None, :]] * wx
    return top * (1.0 - wy) + bot * wy


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2-D array with nearest-neighbor sampling.

    Preserves the input's value set, so binary masks stay binary.
    """
    src = np.asarray(image)
    in_h, in_w = src.shape
    if (in_h, in_w) == (height, width):
        return src.copy()
    ys = np.clip(np.floor(_source_coords(height, in_h) + 0.5), 0, in_h - 1).astype(np.intp)
    xs = np.clip(np.floor(_source_coords(width, in_w) + 0.5), 0, in_w - 1).astype(np.intp)
    return src[ys[:, None], xs[None, :]].copy()
