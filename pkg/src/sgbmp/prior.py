"""Disparity/uncertainty priors and their conversion to per-pixel search ranges."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import imaging, sgm
from .cost import MatcherParams, PpsrMap
from .imaging import INVALID

SIGMA_MIN = 0.25


@dataclass
class PriorField:
    """Predicted disparity ``y`` and its standard deviation ``sigma``.

    ``factor`` is the ratio between the matching resolution and the
    resolution the prior lives at (1 for a full-resolution prior).
    """

    y: np.ndarray
    sigma: np.ndarray
    factor: int = 1

    def __post_init__(self):
        if self.y.shape != self.sigma.shape:
            raise ValueError(f"prior y {self.y.shape} and sigma {self.sigma.shape} differ in size")
        # y valid <=> sigma valid
        bad = ~(np.isfinite(self.y) & np.isfinite(self.sigma))
        if bad.any():
            self.y = np.where(bad, INVALID, self.y).astype(np.float32)
            self.sigma = np.where(bad, INVALID, self.sigma).astype(np.float32)

    @classmethod
    def invalid(cls, shape, factor: int = 1) -> "PriorField":
        return cls(np.full(shape, INVALID, np.float32), np.full(shape, INVALID, np.float32), factor)


def sigma_max(params: MatcherParams, lambda_b: float) -> float:
    return params.num_disparities / lambda_b


def load_prior(y_path, sigma_path, is_log_variance: bool = False, sigma_min: float = SIGMA_MIN, factor: int = 1) -> PriorField:
    """Read a prior from two PFM maps; ``is_log_variance`` means the second map holds log(sigma^2)."""
    y = imaging.load_pfm(y_path)
    s = imaging.load_pfm(sigma_path)
    if y.shape != s.shape:
        raise ValueError(f"prior maps differ in size: {y.shape} ({y_path}) vs {s.shape} ({sigma_path})")
    if is_log_variance:
        bad = ~np.isfinite(s) & np.isfinite(y)
        if bad.any():
            raise ValueError(f"{sigma_path}: {int(bad.sum())} non-finite log-variance values at valid prior pixels")
        with np.errstate(over="ignore"):
            sigma = np.exp(s.astype(np.float64) / 2.0)
    else:
        sigma = s.astype(np.float64)
    sigma = np.where(np.isfinite(sigma), np.maximum(sigma, sigma_min), np.inf).astype(np.float32)
    return PriorField(y, sigma, factor)


def read_prior_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return {
        "factor": int(meta.get("factor", 1)),
        "is_log_variance": meta.get("is_log_variance", "false").lower() in ("1", "true", "yes"),
        "y": meta.get("y"),
        "sigma": meta.get("sigma"),
    }


def save_prior(prior: PriorField, directory, stem: str = "prior") -> Path:
    """Write ``<stem>_y.pfm``, ``<stem>_sigma.pfm`` and the ``<stem>.txt`` sidecar; returns the sidecar path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imaging.save_pfm(prior.y, d / f"{stem}_y.pfm")
    imaging.save_pfm(prior.sigma, d / f"{stem}_sigma.pfm")
    meta = d / f"{stem}.txt"
    meta.write_text(
        f"# disparity prior\ny = {stem}_y.pfm\nsigma = {stem}_sigma.pfm\n"
        f"factor = {prior.factor}\nis_log_variance = false\n"
    )
    return meta


def load_prior_meta(meta_path, sigma_min: float = SIGMA_MIN) -> PriorField:
    meta = read_prior_meta(meta_path)
    base = Path(meta_path).parent
    return load_prior(base / meta["y"], base / meta["sigma"], meta["is_log_variance"], sigma_min, meta["factor"])


def rescale_prior(prior: PriorField, factor: int, method: str = "bilinear") -> PriorField:
    """Bring a prior up ``factor`` times; disparity and sigma values scale by the same factor."""
    if factor == 1:
        return PriorField(prior.y.copy(), prior.sigma.copy(), 1)
    y = imaging.upsample_float(prior.y, factor, float(factor), method)
    s = imaging.upsample_float(prior.sigma, factor, float(factor), method)
    return PriorField(y, s, 1)


def compute_ppsr(prior: PriorField, lambda_b: float, params: MatcherParams) -> PpsrMap:
    """``[floor(y - lambda_b*sigma), ceil(y + lambda_b*sigma)]`` clipped to the global range.

    Pixels without a prior search the whole global range.
    """
    y = prior.y.astype(np.float64)
    s = prior.sigma.astype(np.float64)
    ok = np.isfinite(y) & np.isfinite(s)
    y0 = np.where(ok, y, 0.0)
    s0 = np.where(ok, s, 0.0)
    lo = np.floor(y0 - lambda_b * s0)
    hi = np.ceil(y0 + lambda_b * s0)
    lo = np.where(ok, np.clip(lo, params.min_disparity, params.max_disparity), params.min_disparity)
    hi = np.where(ok, np.clip(hi, params.min_disparity, params.max_disparity), params.max_disparity)
    return PpsrMap(lo.astype(np.int32), hi.astype(np.int32))


@njit(cache=True)
def _fill_rows(y, out):
    # each hole takes the smaller of its nearest valid neighbours on the row
    h, w = y.shape
    for r in range(h):
        last = np.nan
        left = np.empty(w)
        for c in range(w):
            if np.isfinite(y[r, c]):
                last = y[r, c]
            left[c] = last
        last = np.nan
        for c in range(w - 1, -1, -1):
            if np.isfinite(y[r, c]):
                last = y[r, c]
                out[r, c] = y[r, c]
            else:
                a = left[c]
                if np.isnan(a):
                    out[r, c] = last if not np.isnan(last) else np.inf
                elif np.isnan(last):
                    out[r, c] = a
                else:
                    out[r, c] = min(a, last)


@njit(cache=True)
def _curvature(cost, length, offset, best, out):
    h, w = length.shape
    for r in range(h):
        for c in range(w):
            b = best[r, c]
            o = offset[r, c]
            if 0 < b < length[r, c] - 1:
                out[r, c] = float(cost[o + b - 1]) + float(cost[o + b + 1]) - 2.0 * float(cost[o + b])
            else:
                out[r, c] = 0.0


def pyramid_prior(left, right, params: MatcherParams, factor: int = 4, lambda_b: float = 3.0,
                  kappa: float | None = None, sigma_min: float = SIGMA_MIN,
                  config: "sgm.AggregationConfig | None" = None, workers: int = 1) -> PriorField:
    """Prior from a coarse full-range SGBM run on ``factor``-downsampled images.

    ``y`` is the coarse subpixel disparity. ``sigma`` comes from the curvature
    of the aggregated cost at the winner, ``kappa / sqrt(curvature)``, with
    ``kappa = sqrt(p1)`` by default so that a second difference equal to
    ``p1`` gives one pixel. Pixels rejected by the coarse checks get the
    maximal sigma and a row-wise hole-filled ``y``. The result is expressed at
    the coarse resolution and carries ``factor``.
    """
    if factor < 2:
        raise ValueError(f"pyramid factor must be >= 2, got {factor}")
    lp = imaging.downsample(left, factor)
    rp = imaging.downsample(right, factor)
    lo_d = math.floor(params.min_disparity / factor)
    hi_d = math.ceil((params.min_disparity + params.num_disparities) / factor)
    coarse = MatcherParams(
        min_disparity=lo_d,
        num_disparities=max(1, hi_d - lo_d),
        block_size=params.block_size,
        p1=params.p1,
        p2=params.p2,
        prefilter_cap=params.prefilter_cap,
        uniqueness_ratio=0,
        disp12_max_diff=params.disp12_max_diff,
        speckle_window=max(1, params.speckle_window // (factor * factor)),
        speckle_range=max(1.0, params.speckle_range / factor),
        cost_scale_divisor=params.cost_scale_divisor,
        raw_intensity_term=params.raw_intensity_term,
    )
    directions = 8 if config is None else config.directions
    cfg = sgm.AggregationConfig(directions, "off")
    res = sgm.match(lp, rp, PpsrMap.full_range(lp.shape, coarse), coarse, cfg, uniqueness_ratio=0, workers=workers)
    smax = sigma_max(coarse, lambda_b)
    k = math.sqrt(params.p1) if kappa is None else kappa
    curv = np.empty(lp.shape, dtype=np.float64)
    S = res.aggregated
    _curvature(S.cost, S.length, S.offset, res.wta_index, curv)
    with np.errstate(divide="ignore"):
        sigma = np.where(curv > 0, k / np.sqrt(np.maximum(curv, 1e-300)), smax)
    sigma = np.clip(sigma, sigma_min, smax)
    valid = np.isfinite(res.disparity)
    sigma[~valid] = smax
    y = np.empty(lp.shape, dtype=np.float64)
    _fill_rows(res.disparity.astype(np.float64), y)
    sigma[~np.isfinite(y)] = np.inf
    return PriorField(y.astype(np.float32), sigma.astype(np.float32), factor)
