"""Semi-global aggregation over ragged cost volumes and the SGBM / SGBMP matchers."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import occlusion, prior as prior_mod
from .cost import COST_MAX, MatcherParams, PpsrMap, RaggedCostVolume, build_cost_volume
from .imaging import INVALID

# (dx, dy) per path; the first four form the 4-direction mode
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))

WEIGHT_MODES = ("off", "literal_eq4", "attenuation")


@dataclass(frozen=True)
class AggregationConfig:
    directions: int = 8
    weight_mode: str = "attenuation"
    lambda_s: float = 0.1
    lambda_d: float = 0.1

    def __post_init__(self):
        if self.directions not in (4, 8):
            raise ValueError(f"directions must be 4 or 8, got {self.directions}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not 0.0 <= self.lambda_s < 1.0:
            raise ValueError(f"lambda_s must lie in [0, 1), got {self.lambda_s}")
        if self.lambda_d <= 0:
            raise ValueError(f"lambda_d must be > 0, got {self.lambda_d}")


# --------------------------------------------------------------------------
# aggregation


@njit(nogil=True, cache=True)
def _aggregate_direction(cost, lo, length, offset, dx, dy, p1, p2, L, minL):
    h, w = lo.shape
    for yi in range(h):
        y = yi if dy >= 0 else h - 1 - yi
        qy = y - dy
        for xi in range(w):
            x = xi if dx >= 0 else w - 1 - xi
            qx = x - dx
            o = offset[y, x]
            n = length[y, x]
            if qy < 0 or qy >= h or qx < 0 or qx >= w:
                m = np.int64(1) << 40
                for i in range(n):
                    v = np.int64(cost[o + i])
                    L[o + i] = v
                    m = min(m, v)
                minL[y, x] = m
                continue
            qo = offset[qy, qx]
            qn = length[qy, qx]
            shift = lo[y, x] - lo[qy, qx]
            mq = minL[qy, qx]
            jump = mq + p2
            m = np.int64(1) << 40
            for i in range(n):
                j = i + shift
                best = jump
                if 0 <= j < qn:
                    best = min(best, np.int64(L[qo + j]))
                if 1 <= j <= qn:
                    best = min(best, L[qo + j - 1] + p1)
                if -1 <= j < qn - 1:
                    best = min(best, L[qo + j + 1] + p1)
                v = np.int64(cost[o + i]) + best - mq
                L[o + i] = v
                m = min(m, v)
            minL[y, x] = m


def aggregate_direction(volume: RaggedCostVolume, params: MatcherParams, direction: tuple[int, int]) -> np.ndarray:
    """Path costs ``L_r`` for one direction ``(dx, dy)``, packed like ``volume.cost`` (int32)."""
    dx, dy = direction
    L = np.empty(volume.packed_length, dtype=np.int32)
    minL = np.empty(volume.shape, dtype=np.int64)
    _aggregate_direction(volume.cost, volume.lo, volume.length, volume.offset, dx, dy, params.p1, params.p2, L, minL)
    return L


@njit(nogil=True, cache=True)
def _accumulate(acc, L):
    for i in range(acc.size):
        acc[i] += L[i]


@njit(nogil=True, cache=True)
def _saturate(acc, out):
    n = 0
    for i in range(acc.size):
        v = acc[i]
        if v > 65535:
            v = 65535
            n += 1
        out[i] = v
    return n


def aggregate(volume: RaggedCostVolume, params: MatcherParams, config: AggregationConfig = AggregationConfig(), workers: int = 1) -> RaggedCostVolume:
    """Sum the path costs of all directions into ``S``.

    A candidate of the predecessor that lies outside its range simply drops
    out of the recursion's minimum. Each direction is computed into a private
    buffer and summed in the fixed ``DIRECTIONS`` order.
    """
    dirs = DIRECTIONS[: config.directions]
    acc = np.zeros(volume.packed_length, dtype=np.int64)
    if workers <= 1:
        L = np.empty(volume.packed_length, dtype=np.int32)
        minL = np.empty(volume.shape, dtype=np.int64)
        for dx, dy in dirs:
            _aggregate_direction(volume.cost, volume.lo, volume.length, volume.offset, dx, dy, params.p1, params.p2, L, minL)
            _accumulate(acc, L)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for L in pool.map(lambda r: aggregate_direction(volume, params, r), dirs):
                _accumulate(acc, L)
    out = np.empty(volume.packed_length, dtype=np.uint16)
    nsat = _saturate(acc, out)
    return volume.with_cost(out, nsat)


# --------------------------------------------------------------------------
# prior weighting


@njit(nogil=True, cache=True)
def _weight(cost, lo, length, offset, y, sigma, mode, ls, ld, out):
    h, w = lo.shape
    for r in range(h):
        for c in range(w):
            o = offset[r, c]
            yp = y[r, c]
            sp = sigma[r, c]
            ok = np.isfinite(yp) and np.isfinite(sp)
            for i in range(length[r, c]):
                s = cost[o + i]
                if ok:
                    e = ls * np.exp(-ld * sp * abs(lo[r, c] + i - yp))
                    f = e if mode == 1 else 1.0 - e
                    v = np.floor(s * f + 0.5)
                    out[o + i] = min(v, 65535.0)
                else:
                    out[o + i] = s


def apply_prior_weight(S: RaggedCostVolume, prior, config: AggregationConfig) -> RaggedCostVolume:
    """Re-weight aggregated costs towards the prior disparity.

    ``literal_eq4`` multiplies by ``lambda_s * exp(-lambda_d * sigma * |d - y|)``;
    ``attenuation`` multiplies by one minus that factor, which lowers the cost
    near ``y`` instead of raising it. Pixels with an invalid prior keep ``S``.
    """
    if config.weight_mode == "off":
        return S
    mode = 1 if config.weight_mode == "literal_eq4" else 2
    y = np.asarray(prior.y, dtype=np.float64)
    sigma = np.asarray(prior.sigma, dtype=np.float64)
    if y.shape != S.shape:
        raise ValueError(f"prior dimensions {y.shape} differ from volume {S.shape}")
    out = np.empty_like(S.cost)
    _weight(S.cost, S.lo, S.length, S.offset, y, sigma, mode, config.lambda_s, config.lambda_d, out)
    return S.with_cost(out, S.saturated)


# --------------------------------------------------------------------------
# selection and checks


@njit(nogil=True, cache=True)
def _wta(cost, lo, length, offset, disp, best):
    h, w = lo.shape
    for r in range(h):
        for c in range(w):
            o = offset[r, c]
            n = length[r, c]
            b = 0
            for i in range(1, n):
                if cost[o + i] < cost[o + b]:
                    b = i
            best[r, c] = b
            d = float(lo[r, c] + b)
            if 0 < b < n - 1:
                cm = float(cost[o + b - 1])
                c0 = float(cost[o + b])
                cp = float(cost[o + b + 1])
                den = cm + cp - 2.0 * c0
                if den > 0:
                    off = (cm - cp) / (2.0 * den)
                    d += min(0.5, max(-0.5, off))
            disp[r, c] = d


def wta_select(S: RaggedCostVolume, params: MatcherParams | None = None, return_index: bool = False):
    """Winner-take-all disparity with parabolic subpixel refinement; ties go to the smaller disparity."""
    disp = np.empty(S.shape, dtype=np.float32)
    best = np.empty(S.shape, dtype=np.int32)
    _wta(S.cost, S.lo, S.length, S.offset, disp, best)
    if return_index:
        return disp, best
    return disp


def uniqueness_check(costs, best: int, ratio: int) -> bool:
    """True when the winner at index ``best`` of ``costs`` survives the uniqueness test."""
    costs = np.asarray(costs, dtype=np.int64)
    limit = int(costs[best]) * (100 + ratio)
    for i, s in enumerate(costs):
        if abs(i - best) > 1 and int(s) * 100 <= limit:
            return False
    return True


@njit(nogil=True, cache=True)
def _uniqueness(cost, length, offset, best, ratio, keep):
    h, w = length.shape
    for r in range(h):
        for c in range(w):
            o = offset[r, c]
            b = best[r, c]
            limit = np.int64(cost[o + b]) * (100 + ratio)
            ok = True
            for i in range(length[r, c]):
                if abs(i - b) > 1 and np.int64(cost[o + i]) * 100 <= limit:
                    ok = False
                    break
            keep[r, c] = ok


def uniqueness_mask(S: RaggedCostVolume, best: np.ndarray, ratio: int) -> np.ndarray:
    keep = np.empty(S.shape, dtype=np.bool_)
    _uniqueness(S.cost, S.length, S.offset, best, ratio, keep)
    return keep


@njit(nogil=True, cache=True)
def _right_disparity(cost, lo, length, offset, out):
    h, w = lo.shape
    bestc = np.empty(w, np.int64)
    bestd = np.empty(w, np.int64)
    for r in range(h):
        bestc[:] = np.int64(1) << 40
        bestd[:] = -(np.int64(1) << 40)
        for c in range(w):
            o = offset[r, c]
            for i in range(length[r, c]):
                d = lo[r, c] + i
                xr = c - d
                if 0 <= xr < w:
                    v = np.int64(cost[o + i])
                    if v < bestc[xr] or (v == bestc[xr] and d < bestd[xr]):
                        bestc[xr] = v
                        bestd[xr] = d
        for xr in range(w):
            if bestc[xr] < (np.int64(1) << 40):
                out[r, xr] = bestd[xr]
            else:
                out[r, xr] = np.inf


def right_disparity(S: RaggedCostVolume) -> np.ndarray:
    """Right-view integer disparity re-projected from the left volume: argmin over d of S(x + d, d)."""
    out = np.empty(S.shape, dtype=np.float32)
    _right_disparity(S.cost, S.lo, S.length, S.offset, out)
    return out


def lr_consistency(disp_left: np.ndarray, disp_right: np.ndarray, max_diff: float) -> np.ndarray:
    """Invalidate left disparities that disagree with the right view by more than ``max_diff``.

    A left pixel whose rounded correspondence falls outside the right image, or
    onto a right pixel without a disparity, is invalidated as well. A negative
    or infinite ``max_diff`` disables the check.
    """
    out = np.array(disp_left, dtype=np.float32, copy=True)
    if max_diff < 0 or not np.isfinite(max_diff):
        return out
    h, w = out.shape
    valid = np.isfinite(out)
    xs = np.arange(w)[None, :] - np.floor(np.where(valid, out, 0) + 0.5).astype(np.int64)
    inside = (xs >= 0) & (xs < w)
    rows = np.broadcast_to(np.arange(h)[:, None], out.shape)
    dr = np.full(out.shape, np.inf, dtype=np.float32)
    dr[inside] = disp_right[rows[inside], xs[inside]]
    with np.errstate(invalid="ignore"):
        bad = valid & (~np.isfinite(dr) | (np.abs(out - dr) > max_diff))
    out[bad] = INVALID
    return out


@njit(cache=True)
def _speckle(disp, window, rng, out):
    h, w = disp.shape
    seen = np.zeros((h, w), np.bool_)
    stack = np.empty(h * w, np.int64)
    comp = np.empty(h * w, np.int64)
    for r0 in range(h):
        for c0 in range(w):
            if seen[r0, c0] or not np.isfinite(disp[r0, c0]):
                continue
            seen[r0, c0] = True
            top = 0
            n = 0
            stack[top] = r0 * w + c0
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                comp[n] = p
                n += 1
                r = p // w
                c = p % w
                v = disp[r, c]
                for k in range(4):
                    rr = r + (1 if k == 0 else (-1 if k == 1 else 0))
                    cc = c + (1 if k == 2 else (-1 if k == 3 else 0))
                    if 0 <= rr < h and 0 <= cc < w and not seen[rr, cc]:
                        u = disp[rr, cc]
                        if np.isfinite(u) and abs(u - v) <= rng:
                            seen[rr, cc] = True
                            stack[top] = rr * w + cc
                            top += 1
            if n < window:
                for i in range(n):
                    out[comp[i] // w, comp[i] % w] = np.inf


def speckle_filter(disp: np.ndarray, window: int, rng: float) -> np.ndarray:
    """Invalidate 4-connected components of similar disparity with fewer than ``window`` pixels."""
    out = np.array(disp, dtype=np.float32, copy=True)
    if window <= 0:
        return out
    _speckle(np.asarray(disp, dtype=np.float32), int(window), float(rng), out)
    return out


# --------------------------------------------------------------------------
# matchers


@dataclass
class MatchResult:
    disparity: np.ndarray
    wta: np.ndarray
    wta_index: np.ndarray
    aggregated: RaggedCostVolume
    saturated_cost: int
    saturated_aggregate: int
    timings: dict = field(default_factory=dict)


def match(left, right, ppsr: PpsrMap, params: MatcherParams, config: AggregationConfig = AggregationConfig(),
          prior=None, uniqueness_ratio: int | None = None, workers: int = 1) -> MatchResult:
    """Cost volume, aggregation, optional prior weighting, selection and post-checks over ``ppsr``."""
    t = {}
    t0 = time.perf_counter()
    vol = build_cost_volume(left, right, ppsr, params, workers=workers)
    t["cost"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    S = aggregate(vol, params, config, workers=workers)
    t["aggregate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if prior is not None:
        S = apply_prior_weight(S, prior, config)
    disp, best = wta_select(S, params, return_index=True)
    raw = disp.copy()
    ratio = params.uniqueness_ratio if uniqueness_ratio is None else uniqueness_ratio
    disp[~uniqueness_mask(S, best, ratio)] = INVALID
    disp = lr_consistency(disp, right_disparity(S), params.disp12_max_diff)
    disp = speckle_filter(disp, params.speckle_window, params.speckle_range)
    t["select"] = time.perf_counter() - t0
    return MatchResult(disp, raw, best, S, vol.saturated, S.saturated, t)


def run_sgbm(left, right, params: MatcherParams, config: AggregationConfig = AggregationConfig(), workers: int = 1) -> np.ndarray:
    """Baseline full-range SGBM; with ``uniqueness_ratio=0`` this is the SGBMUR variant."""
    cfg = AggregationConfig(config.directions, "off", config.lambda_s, config.lambda_d)
    ppsr = PpsrMap.full_range(np.shape(left), params)
    return match(left, right, ppsr, params, cfg, workers=workers).disparity


@dataclass
class GuidedResult:
    prior: "prior_mod.PriorField"
    occlusion: np.ndarray
    filtered_y: np.ndarray
    filtered_mask: np.ndarray
    ppsr: PpsrMap
    result: MatchResult

    @property
    def disparity(self) -> np.ndarray:
        return self.result.disparity


def guided_match(left, right, params: MatcherParams, prior, config: AggregationConfig = AggregationConfig(),
                 lambda_b: float = 3.0, workers: int = 1, interpolation: str = "bilinear") -> GuidedResult:
    """Full SGBMP pipeline keeping every intermediate product."""
    h, w = np.shape(left)
    full = prior_mod.rescale_prior(prior, prior.factor, method=interpolation)
    full = prior_mod.PriorField(full.y[:h, :w].copy(), full.sigma[:h, :w].copy())
    if full.y.shape != (h, w):
        raise ValueError(f"prior covers {full.y.shape}, image is {(h, w)}")
    mask = occlusion.derive_occlusion(full.y)
    fy, fmask = occlusion.guided_filter(full.y, mask)
    guided = prior_mod.PriorField(fy, full.sigma)
    ppsr = prior_mod.compute_ppsr(guided, lambda_b, params)
    res = match(left, right, ppsr, params, config, prior=guided, uniqueness_ratio=0, workers=workers)
    return GuidedResult(full, mask, fy, fmask, ppsr, res)


def run_sgbmp(left, right, params: MatcherParams, prior, config: AggregationConfig = AggregationConfig(),
              lambda_b: float = 3.0, workers: int = 1) -> np.ndarray:
    """Prior-guided SGBM over per-pixel search ranges; the uniqueness check is disabled."""
    return guided_match(left, right, params, prior, config, lambda_b, workers).disparity
