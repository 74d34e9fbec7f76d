"""Occlusion proposal from a disparity map and the 3-pixel median-vote repair filter."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _derive(y, mask):
    h, w = y.shape
    for r in range(h):
        # z-buffer over the right-image columns hit by this row
        lo = 1 << 40
        hi = -(1 << 40)
        for c in range(w):
            if np.isfinite(y[r, c]):
                t = int(np.floor(c - y[r, c] + 0.5))
                lo = min(lo, t)
                hi = max(hi, t)
        if hi < lo:
            mask[r, :] = 1
            continue
        zbuf = np.full(hi - lo + 1, -np.inf)
        for c in range(w):
            if np.isfinite(y[r, c]):
                t = int(np.floor(c - y[r, c] + 0.5)) - lo
                zbuf[t] = max(zbuf[t], y[r, c])
        for c in range(w):
            if not np.isfinite(y[r, c]):
                mask[r, c] = 1
            else:
                t = int(np.floor(c - y[r, c] + 0.5)) - lo
                mask[r, c] = 1 if zbuf[t] > y[r, c] + 0.5 else 0


def derive_occlusion(y: np.ndarray) -> np.ndarray:
    """Flag left pixels hidden in the right view under the disparity ``y``.

    Pixel ``p`` is occluded when another pixel of the row lands on the same
    right column ``round(x - y)`` with a disparity more than 0.5 px larger.
    Invalid disparities are flagged as well. Returns a uint8 mask of 0/1.
    """
    y = np.asarray(y, dtype=np.float64)
    mask = np.zeros(y.shape, dtype=np.uint8)
    _derive(y, mask)
    return mask


@njit(cache=True)
def _filter_rows(y, m, sequential):
    h, w = y.shape
    src = m.copy()
    ysrc = y.copy()
    for j in range(h):
        for k in range(1, w - 1):
            if sequential:
                a, b, c = m[j, k - 1], m[j, k], m[j, k + 1]
                ya, yc = y[j, k - 1], y[j, k + 1]
            else:
                a, b, c = src[j, k - 1], src[j, k], src[j, k + 1]
                ya, yc = ysrc[j, k - 1], ysrc[j, k + 1]
            med = 1 if a + b + c >= 2 else 0
            if b != med:
                y[j, k] = 0.5 * ya + 0.5 * yc
                m[j, k] = med


def guided_filter_pass(y: np.ndarray, mask: np.ndarray, direction: str = "horizontal", sequential: bool = True):
    """One pass of the median-vote filter along rows (``horizontal``) or columns (``vertical``).

    Wherever the mask value is not the median of its 3-pixel window, the
    disparity is replaced by the mean of its two window neighbours and the
    flag by the median. With ``sequential=True`` the scan reads values already
    updated earlier on the same line; ``sequential=False`` reads the input
    only. Border pixels of each line are left untouched.
    """
    if direction not in ("horizontal", "vertical"):
        raise ValueError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")
    yy = np.array(y, dtype=np.float32, copy=True)
    mm = (np.asarray(mask) != 0).astype(np.uint8)
    if yy.shape != mm.shape:
        raise ValueError(f"disparity {yy.shape} and mask {mm.shape} differ in size")
    if direction == "vertical":
        yt, mt = np.ascontiguousarray(yy.T), np.ascontiguousarray(mm.T)
        _filter_rows(yt, mt, sequential)
        return np.ascontiguousarray(yt.T), np.ascontiguousarray(mt.T)
    _filter_rows(yy, mm, sequential)
    return yy, mm


def guided_filter(y: np.ndarray, mask: np.ndarray, sequential: bool = True):
    """Horizontal pass followed by the vertical pass on its result."""
    y1, m1 = guided_filter_pass(y, mask, "horizontal", sequential)
    return guided_filter_pass(y1, m1, "vertical", sequential)
