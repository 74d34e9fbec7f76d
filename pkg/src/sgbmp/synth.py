"""Synthetic rectified stereo pairs with exact ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .imaging import INVALID


@dataclass
class SyntheticPair:
    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray
    nonocc: np.ndarray  # True where the left pixel is visible in the right view


def random_dots(shape, rng: np.random.Generator, dot: int = 1) -> np.ndarray:
    h, w = shape
    small = rng.integers(0, 256, size=(-(-h // dot), -(-w // dot)), dtype=np.uint8)
    return np.repeat(np.repeat(small, dot, axis=0), dot, axis=1)[:h, :w].copy()


@njit(cache=True)
def _warp(left, disp, right, owner):
    h, w = left.shape
    owner_d = np.full(w, -1, np.int64)
    for r in range(h):
        owner_d[:] = -1
        for c in range(w):
            xr = c - disp[r, c]
            # ties go to the rightmost source pixel
            if 0 <= xr < w and disp[r, c] >= owner_d[xr]:
                owner[r, xr] = c
                owner_d[xr] = disp[r, c]
                right[r, xr] = left[r, c]


def render(left: np.ndarray, disp: np.ndarray, rng: np.random.Generator, dot: int = 1) -> SyntheticPair:
    """Warp ``left`` into a right view under the integer disparity ``disp``.

    Nearer surfaces (larger disparity) win where several left pixels land on
    the same right column; right pixels nobody lands on get fresh dots.
    """
    h, w = left.shape
    disp = np.asarray(disp, dtype=np.int64)
    right = random_dots((h, w), rng, dot)
    owner = np.full((h, w), -1, dtype=np.int64)
    _warp(left, disp, right, owner)
    nonocc = np.zeros((h, w), dtype=bool)
    rows, cols = np.nonzero(owner >= 0)
    nonocc[rows, owner[rows, cols]] = True
    gt = disp.astype(np.float32)
    gt[np.arange(w)[None, :] - disp < 0] = INVALID
    return SyntheticPair(left, right, gt, nonocc)


def shift_pair(shape=(256, 256), disparity: int = 12, seed: int = 0, dot: int = 1) -> SyntheticPair:
    """Right view equal to the left one translated by ``disparity`` pixels."""
    rng = np.random.default_rng(seed)
    left = random_dots(shape, rng, dot)
    return render(left, np.full(shape, disparity), rng, dot)


def step_pair(shape=(256, 256), disparity: int = 10, foreground: int = 30, seed: int = 0, dot: int = 1) -> SyntheticPair:
    """Background at ``disparity`` on the left half, foreground at ``foreground`` on the right half."""
    rng = np.random.default_rng(seed)
    left = random_dots(shape, rng, dot)
    d = np.full(shape, disparity)
    d[:, shape[1] // 2 :] = foreground
    return render(left, d, rng, dot)


def rds_pair(shape=(256, 256), disparity: int = 10, foreground: int = 20, seed: int = 0, dot: int = 1) -> SyntheticPair:
    """Random-dot stereogram: a centred rectangle at ``foreground`` over a plane at ``disparity``."""
    rng = np.random.default_rng(seed)
    h, w = shape
    left = random_dots(shape, rng, dot)
    d = np.full(shape, disparity)
    d[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = foreground
    return render(left, d, rng, dot)


KINDS = {"shift": shift_pair, "step": step_pair, "rds": rds_pair}


def make_pair(kind: str, shape=(256, 256), disparity: int = 12, seed: int = 0, **kw) -> SyntheticPair:
    try:
        fn = KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(KINDS)}") from None
    return fn(shape=shape, disparity=disparity, seed=seed, **kw)
