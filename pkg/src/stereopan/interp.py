"""Bilinear sampling and resizing on pixel-center grids.

Pixel (row, col) sits at coordinate (y=row, x=col). Resizing uses the
half-pixel (align_corners=False) convention so constant fields stay constant.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``field`` (H,W) or (H,W,C) at float coords; returns (values, in_bounds).

    Out-of-bounds queries return zeros with in_bounds False. Queries exactly
    on the last row/column are in bounds.
    """
    h, w = field.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if field.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    vals = (
        field[y0, x0] * (1 - fx) * (1 - fy)
        + field[y0, x1] * fx * (1 - fy)
        + field[y1, x0] * (1 - fx) * fy
        + field[y1, x1] * fx * fy
    )
    vals = np.where(inside[..., None] if field.ndim == 3 else inside, vals, 0.0)
    return vals, inside


def bilinear_sample_masked(
    field: np.ndarray, valid: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Like bilinear_sample but a query also needs all four source pixels valid."""
    h, w = field.shape[:2]
    vals, inside = bilinear_sample(field, x, y)
    xc = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    yc = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ok = inside & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    vals = np.where(ok[..., None] if field.ndim == 3 else ok, vals, 0.0)
    return vals, ok


def bilinear_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize (H,W) or (H,W,C) to ``out_hw`` with edge clamping."""
    h, w = arr.shape[:2]
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return arr.astype(np.float64, copy=True)
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    vals, _ = bilinear_sample(arr.astype(np.float64, copy=False), gx, gy)
    return vals


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer coordinate grids (x, y) of shape (h, w)."""
    gy, gx = np.mgrid[0:h, 0:w]
    return gx.astype(np.float64), gy.astype(np.float64)
