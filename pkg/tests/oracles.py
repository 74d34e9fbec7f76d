"""Slow, direct reference implementations used to check the fast paths.

Nothing here imports the code under test.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


def sobel_x(img, cap):
    img = np.asarray(img, dtype=np.int64)
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.int64)
    k = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    for y in range(h):
        for x in range(w):
            s = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    s += k[dy + 1][dx + 1] * img[yy, xx]
            out[y, x] = min(max(s, -cap), cap) + cap
    return out


def bt(left_row, right_row, x, d, sat):
    """Birchfield-Tomasi, straight from the min-over-interpolated-interval definition."""
    n = len(right_row)
    xr = x - d
    if xr < 0 or xr >= n:
        return Fraction(sat)

    def interval(row, i):
        v = Fraction(int(row[i]))
        a = (v + int(row[max(i - 1, 0)])) / 2
        b = (v + int(row[min(i + 1, len(row) - 1)])) / 2
        return v, min(a, v, b), max(a, v, b)

    il, lmin, lmax = interval(left_row, x)
    ir, rmin, rmax = interval(right_row, xr)
    return min(max(0, il - rmax, rmin - il), max(0, ir - lmax, lmin - ir))


def cost_volume(left, right, lo, hi, block, cap, divisor):
    """Triple loop over pixels, disparities and the clamped window."""
    pl, pr = sobel_x(left, cap), sobel_x(right, cap)
    h, w = pl.shape
    half = block // 2
    out = {}
    for y in range(h):
        for x in range(w):
            for d in range(lo[y, x], hi[y, x] + 1):
                s = Fraction(0)
                for dy in range(-half, half + 1):
                    for dx in range(-half, half + 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        s += bt(pl[yy], pr[yy], xx, d, 2 * cap)
                out[(y, x, d)] = math.floor(s / divisor + Fraction(1, 2))
    return out


def scanlines(h, w, direction):
    """Pixel sequences along ``direction``, each starting at a pixel with no predecessor."""
    dx, dy = direction
    lines = []
    for y in range(h):
        for x in range(w):
            if 0 <= y - dy < h and 0 <= x - dx < w:
                continue
            line = []
            yy, xx = y, x
            while 0 <= yy < h and 0 <= xx < w:
                line.append((yy, xx))
                yy += dy
                xx += dx
            lines.append(line)
    return lines


def penalty(a, b, p1, p2):
    if a == b:
        return 0
    return p1 if abs(a - b) == 1 else p2


def scanline_dp(costs, p1, p2):
    """Path costs along one scanline; ``costs`` is a list of {disparity: cost} dicts.

    Uses the pairwise form: min over every predecessor candidate of its cost
    plus the transition penalty.
    """
    out = []
    prev = None
    for c in costs:
        if prev is None:
            cur = dict(c)
        else:
            m = min(prev.values())
            cur = {d: v + min(prev[a] + penalty(a, d, p1, p2) for a in prev) - m for d, v in c.items()}
        out.append(cur)
        prev = cur
    return out


def scanline_bruteforce(costs, p1, p2):
    """Same quantity by enumerating every disparity assignment of each prefix.

    ``L(k, d) = E_k(d) - min_a E_{k-1}(a)`` where ``E_k(d)`` is the minimal
    energy of a labelling of pixels ``0..k`` that ends with ``d``.
    """
    out = []
    energies = []
    for k in range(len(costs)):
        e = {}
        for labels in itertools.product(*[sorted(c) for c in costs[: k + 1]]):
            v = sum(costs[i][labels[i]] for i in range(k + 1))
            v += sum(penalty(labels[i - 1], labels[i], p1, p2) for i in range(1, k + 1))
            e[labels[-1]] = min(e.get(labels[-1], v), v)
        energies.append(e)
        base = min(energies[k - 1].values()) if k else 0
        out.append({d: v - base for d, v in e.items()})
    return out


def aggregate_direction(costs, shape, direction, p1, p2):
    """``costs`` maps (y, x) -> {d: cost}; returns the same layout of path costs."""
    h, w = shape
    res = {}
    for line in scanlines(h, w, direction):
        for p, v in zip(line, scanline_dp([costs[q] for q in line], p1, p2)):
            res[p] = v
    return res


def metrics(pred, gt, mask=None):
    pred = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool).ravel()
    n = nv = nbad = 0
    errs = []
    for p, g, m in zip(pred, gt, mask):
        if not m or not math.isfinite(g):
            continue
        n += 1
        if not math.isfinite(p):
            continue
        nv += 1
        e = abs(p - g)
        errs.append(e)
        if e > 1.0:
            nbad += 1
    mean = sum(errs) / len(errs)
    var = sum((e - mean) ** 2 for e in errs) / len(errs)
    return 100.0 * nbad / n, 100.0 * (n - nv) / n, mean, math.sqrt(var)


def components(disp, rng):
    """Flood fill labelling with 4-connectivity; returns {pixel: component size}."""
    h, w = disp.shape
    label = {}
    sizes = []
    for y in range(h):
        for x in range(w):
            if (y, x) in label or not np.isfinite(disp[y, x]):
                continue
            todo = [(y, x)]
            label[(y, x)] = len(sizes)
            n = 0
            while todo:
                a, b = todo.pop()
                n += 1
                for c, d in ((a + 1, b), (a - 1, b), (a, b + 1), (a, b - 1)):
                    if 0 <= c < h and 0 <= d < w and (c, d) not in label and np.isfinite(disp[c, d]) \
                            and abs(disp[c, d] - disp[a, b]) <= rng:
                        label[(c, d)] = len(sizes)
                        todo.append((c, d))
            sizes.append(n)
    return {p: sizes[i] for p, i in label.items()}
