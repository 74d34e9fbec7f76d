"""Matching cost over per-pixel disparity ranges.

The cost of pixel ``(y, x)`` at disparity ``d`` is the Birchfield-Tomasi
dissimilarity between the x-Sobel prefiltered left and right images, summed
over a ``block_size`` square window and divided by ``cost_scale_divisor``.
Only the disparities inside each pixel's range are evaluated; the results are
packed back to back into a single ``uint16`` array.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

COST_MAX = 65535


@dataclass(frozen=True)
class MatcherParams:
    min_disparity: int = 0
    num_disparities: int = 64
    block_size: int = 7
    p1: int = 1000
    p2: int = 4000
    prefilter_cap: int = 31
    uniqueness_ratio: int = 10
    disp12_max_diff: float = 2
    speckle_window: int = 39
    speckle_range: float = 4
    cost_scale_divisor: int = 1
    # adds BT on raw intensities to the prefiltered term
    raw_intensity_term: bool = False

    def __post_init__(self):
        if not 0 < self.p1 < self.p2:
            raise ValueError(f"penalties must satisfy 0 < p1 < p2, got p1={self.p1} p2={self.p2}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"block_size must be odd and >= 1, got {self.block_size}")
        if self.num_disparities < 1:
            raise ValueError(f"num_disparities must be >= 1, got {self.num_disparities}")
        if self.cost_scale_divisor < 1:
            raise ValueError(f"cost_scale_divisor must be >= 1, got {self.cost_scale_divisor}")
        if not 1 <= self.prefilter_cap <= 127:
            raise ValueError(f"prefilter_cap must be in [1, 127], got {self.prefilter_cap}")
        if self.uniqueness_ratio < 0:
            raise ValueError("uniqueness_ratio must be >= 0")

    @property
    def max_disparity(self) -> int:
        """Largest searchable disparity (inclusive)."""
        return self.min_disparity + self.num_disparities - 1

    def bt_saturation(self) -> int:
        """Largest single-pixel cost, also used where the right pixel falls outside the image."""
        return 2 * self.prefilter_cap + (255 if self.raw_intensity_term else 0)

    def cost_bound(self) -> int:
        area = self.block_size * self.block_size
        return -(-area * self.bt_saturation() // self.cost_scale_divisor)


@dataclass
class PpsrMap:
    """Inclusive integer disparity interval ``[lo, hi]`` per pixel."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo + 1

    @classmethod
    def full_range(cls, shape, params: MatcherParams) -> "PpsrMap":
        lo = np.full(shape, params.min_disparity, dtype=np.int32)
        hi = np.full(shape, params.max_disparity, dtype=np.int32)
        return cls(lo, hi)


@dataclass
class RaggedCostVolume:
    """Costs of every pixel over its own disparity interval, packed in row-major pixel order.

    Pixel ``(y, x)`` owns ``cost[offset[y, x] : offset[y, x] + length[y, x]]``,
    the i-th entry belonging to disparity ``lo[y, x] + i``.
    """

    lo: np.ndarray
    length: np.ndarray
    offset: np.ndarray
    cost: np.ndarray
    min_disparity: int
    num_disparities: int
    saturated: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.lo.shape

    @property
    def packed_length(self) -> int:
        return int(self.cost.size)

    def memory_ratio(self) -> float:
        h, w = self.shape
        return self.packed_length / (h * w * self.num_disparities)

    def pixel(self, y: int, x: int) -> tuple[np.ndarray, np.ndarray]:
        """Disparities and costs of one pixel."""
        o, n, l = int(self.offset[y, x]), int(self.length[y, x]), int(self.lo[y, x])
        return np.arange(l, l + n), self.cost[o : o + n]

    def with_cost(self, cost: np.ndarray, saturated: int = 0) -> "RaggedCostVolume":
        return RaggedCostVolume(self.lo, self.length, self.offset, cost, self.min_disparity, self.num_disparities, saturated)

    def dense(self, fill: int = -1) -> np.ndarray:
        """Expand to an ``(h, w, num_disparities)`` int64 array, ``fill`` outside each range."""
        h, w = self.shape
        out = np.full((h, w, self.num_disparities), fill, dtype=np.int64)
        _scatter_dense(self.cost, self.lo - self.min_disparity, self.length, self.offset, out)
        return out

    # debugging dump: 24-byte header then lo, length (int32) and costs (uint16)
    _MAGIC = b"RAGCOST1"

    def save(self, path) -> None:
        h, w = self.shape
        with open(path, "wb") as f:
            f.write(self._MAGIC + struct.pack("<IIQ", w, h, self.packed_length))
            f.write(struct.pack("<ii", self.min_disparity, self.num_disparities))
            f.write(self.lo.astype("<i4").tobytes())
            f.write(self.length.astype("<i4").tobytes())
            f.write(self.cost.astype("<u2").tobytes())

    @classmethod
    def load(cls, path) -> "RaggedCostVolume":
        with open(path, "rb") as f:
            head = f.read(24)
            if len(head) < 24 or head[:8] != cls._MAGIC:
                raise ValueError(f"{path}: not a ragged cost volume dump")
            w, h, n = struct.unpack("<IIQ", head[8:])
            mind, numd = struct.unpack("<ii", f.read(8))
            lo = np.frombuffer(f.read(4 * w * h), dtype="<i4").reshape(h, w).astype(np.int32)
            length = np.frombuffer(f.read(4 * w * h), dtype="<i4").reshape(h, w).astype(np.int32)
            cost = np.frombuffer(f.read(2 * n), dtype="<u2").astype(np.uint16)
        if cost.size != n:
            raise ValueError(f"{path}: unexpected end of file")
        return cls(lo, length, _offsets(length), cost, mind, numd)


@njit(cache=True)
def _scatter_dense(cost, rel_lo, length, offset, out):
    h, w = rel_lo.shape
    for y in range(h):
        for x in range(w):
            o = offset[y, x]
            for i in range(length[y, x]):
                out[y, x, rel_lo[y, x] + i] = cost[o + i]


def _offsets(length: np.ndarray) -> np.ndarray:
    flat = length.ravel().astype(np.int64)
    off = np.zeros_like(flat)
    np.cumsum(flat[:-1], out=off[1:])
    return off.reshape(length.shape)


# --------------------------------------------------------------------------
# single-pixel measures


def xsobel_prefilter(img: np.ndarray, cap: int) -> np.ndarray:
    """Horizontal Sobel response clipped to ``[-cap, cap]`` and shifted to ``[0, 2 * cap]``.

    Borders use edge replication.
    """
    if not 1 <= cap <= 127:
        raise ValueError(f"prefilter cap must be in [1, 127], got {cap}")
    p = np.pad(np.asarray(img, dtype=np.int32), 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    g = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    return (np.clip(g, -cap, cap) + cap).astype(np.uint8)


def _bt_range(row, x):
    n = len(row)
    v = float(row[x])
    vl = 0.5 * (v + float(row[max(x - 1, 0)]))
    vr = 0.5 * (v + float(row[min(x + 1, n - 1)]))
    return v, min(vl, v, vr), max(vl, v, vr)


def bt_pixel_cost(left_row, right_row, x: int, d: int, saturation: float = 255.0) -> float:
    """Birchfield-Tomasi dissimilarity of left pixel ``x`` and right pixel ``x - d``.

    Each side is compared against the interval spanned by the other side's
    half-pixel interpolated neighbourhood; the smaller of the two distances is
    returned. A right pixel outside the row yields ``saturation``.
    """
    xr = x - d
    if not 0 <= xr < len(right_row):
        return float(saturation)
    il, lmin, lmax = _bt_range(left_row, x)
    ir, rmin, rmax = _bt_range(right_row, xr)
    d_lr = max(0.0, il - rmax, rmin - il)
    d_rl = max(0.0, ir - lmax, lmin - ir)
    return min(d_lr, d_rl)


def _bt_tables(img: np.ndarray):
    # doubled values keep the half-pixel interpolation exact in integers
    v = np.asarray(img, dtype=np.int32)
    left = np.concatenate([v[:, :1], v[:, :-1]], axis=1)
    right = np.concatenate([v[:, 1:], v[:, -1:]], axis=1)
    v2 = 2 * v
    vl, vr = v + left, v + right
    return v2, np.minimum(np.minimum(vl, vr), v2), np.maximum(np.maximum(vl, vr), v2)


@njit(nogil=True, cache=True, inline="always")
def _bt2(a, amin, amax, b, bmin, bmax):
    d1 = max(0, a - bmax, bmin - a)
    d2 = max(0, b - amax, amin - b)
    return min(d1, d2)


@njit(nogil=True, cache=True)
def _build_rows(y0, y1, tables, ntab, sat2, lo, length, offset, half, divisor, out, sat_rows):
    h, w = lo.shape
    need_lo = np.empty(w, np.int64)
    need_hi = np.empty(w, np.int64)
    for y in range(y0, y1):
        span = 0
        for xp in range(w):
            a = max(0, xp - half)
            b = min(w - 1, xp + half)
            m = lo[y, a]
            mx = lo[y, a] + length[y, a]
            for x in range(a + 1, b + 1):
                m = min(m, lo[y, x])
                mx = max(mx, lo[y, x] + length[y, x])
            need_lo[xp] = m
            need_hi[xp] = mx
            span = max(span, mx - m)
        colsum = np.empty((w, span), np.int64)
        for xp in range(w):
            for d in range(need_lo[xp], need_hi[xp]):
                xr = xp - d
                s = 0
                for dy in range(-half, half + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    if xr < 0 or xr >= w:
                        s += sat2
                    else:
                        for t in range(ntab):
                            base = 6 * t
                            s += _bt2(
                                tables[base, yy, xp], tables[base + 1, yy, xp], tables[base + 2, yy, xp],
                                tables[base + 3, yy, xr], tables[base + 4, yy, xr], tables[base + 5, yy, xr],
                            )
                colsum[xp, d - need_lo[xp]] = s
        nsat = 0
        for x in range(w):
            o = offset[y, x]
            for i in range(length[y, x]):
                d = lo[y, x] + i
                s = 0
                for dx in range(-half, half + 1):
                    xp = min(max(x + dx, 0), w - 1)
                    s += colsum[xp, d - need_lo[xp]]
                v = (s + divisor) // (2 * divisor)
                if v > 65535:
                    v = 65535
                    nsat += 1
                out[o + i] = v
        sat_rows[y] = nsat


def _row_chunks(h: int, workers: int):
    n = max(1, min(h, workers * 4))
    edges = np.linspace(0, h, n + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def build_cost_volume(left: np.ndarray, right: np.ndarray, ppsr: PpsrMap, params: MatcherParams, workers: int = 1) -> RaggedCostVolume:
    """Evaluate the block matching cost of every pixel over its PPSR interval.

    Rows are split among ``workers`` threads; each row writes its own packed
    segment, so the result does not depend on the worker count.
    """
    left = np.asarray(left, dtype=np.uint8)
    right = np.asarray(right, dtype=np.uint8)
    if left.shape != right.shape:
        raise ValueError(f"left/right dimensions differ: {left.shape} vs {right.shape}")
    if ppsr.lo.shape != left.shape:
        raise ValueError(f"PPSR dimensions {ppsr.lo.shape} differ from image dimensions {left.shape}")
    lo = np.ascontiguousarray(ppsr.lo, dtype=np.int32)
    length = np.ascontiguousarray(ppsr.hi - ppsr.lo + 1, dtype=np.int32)
    if (length < 1).any():
        raise ValueError("PPSR has an empty interval")
    if (lo < params.min_disparity).any() or (lo + length > params.min_disparity + params.num_disparities).any():
        raise ValueError("PPSR leaves the global disparity range")
    offset = _offsets(length)

    pl = xsobel_prefilter(left, params.prefilter_cap)
    pr = xsobel_prefilter(right, params.prefilter_cap)
    planes = [*_bt_tables(pl), *_bt_tables(pr)]
    if params.raw_intensity_term:
        planes += [*_bt_tables(left), *_bt_tables(right)]
    tables = np.ascontiguousarray(np.stack(planes), dtype=np.int64)
    ntab = len(planes) // 6

    h = left.shape[0]
    out = np.empty(int(length.sum(dtype=np.int64)), dtype=np.uint16)
    sat_rows = np.zeros(h, dtype=np.int64)
    args = (tables, ntab, 2 * params.bt_saturation(), lo, length, offset, params.block_size // 2, params.cost_scale_divisor, out, sat_rows)
    if workers <= 1:
        _build_rows(0, h, *args)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda c: _build_rows(c[0], c[1], *args), _row_chunks(h, workers)))
    return RaggedCostVolume(lo, length, offset, out, params.min_disparity, params.num_disparities, int(sat_rows.sum()))
