"""Grid resampling with the half-pixel-center convention.

Output pixel ``o`` samples source coordinate ``(o + 0.5) * in / out - 0.5``,
clamped to the source grid. Works on ``(H, W)`` and ``(H, W, C)`` arrays.
"""
import numpy as np


def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ylo, yhi, fy = _axis_weights(h, out_h)
    xlo, xhi, fx = _axis_weights(w, out_w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = arr[ylo][:, xlo] * (1 - fx) + arr[ylo][:, xhi] * fx
    bot = arr[yhi][:, xlo] * (1 - fx) + arr[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Each output pixel takes the source pixel containing its center."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[ys][:, xs]
