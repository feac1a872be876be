"""Bilinear resampling of score/attention maps.

Uses half-pixel-center sampling (source coordinate of destination pixel i is
``(i + 0.5) * scale - 0.5``) with edge replication, the common convention in
image pipelines.  Resizing is only ever applied to values that are constants
of the surrounding computation (gradient-blocked reference maps, inference
heatmaps), so no gradient path is defined here.
"""

from __future__ import annotations

import numpy as np


def bilinear_resize(values: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resize [H, W] (or batched [N, H, W]) values to out_shape = (H2, W2)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim not in (2, 3):
        raise ValueError(f"expected [H,W] or [N,H,W], got shape {values.shape}")
    h, w = values.shape[-2:]
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output extents must be >= 1, got {out_shape}")
    if (h, w) == (oh, ow):
        return values.copy()

    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)

    if values.ndim == 2:
        v00 = values[np.ix_(y0c, x0c)]
        v01 = values[np.ix_(y0c, x1c)]
        v10 = values[np.ix_(y1c, x0c)]
        v11 = values[np.ix_(y1c, x1c)]
    else:
        v00 = values[:, y0c[:, None], x0c[None, :]]
        v01 = values[:, y0c[:, None], x1c[None, :]]
        v10 = values[:, y1c[:, None], x0c[None, :]]
        v11 = values[:, y1c[:, None], x1c[None, :]]

    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    return top * (1.0 - wy)[:, None] + bot * wy[:, None]
