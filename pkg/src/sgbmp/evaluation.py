"""Disparity metrics, the heteroscedastic prior loss, reprojection and point-to-plane accuracy."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class EvaluationError(ValueError):
    pass


@dataclass
class MetricReport:
    bad1_0: float
    invalid: float
    avg_err: float
    std_err: float
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"bad1.0": self.bad1_0, "invalid": self.invalid, "avgErr": self.avg_err, "stdErr": self.std_err, **self.counts}

    def to_text(self, title: str = "") -> str:
        lines = [f"# {title}" if title else "# disparity metrics",
                 "# stdErr is the population (divide-by-N) standard deviation of |pred - gt|",
                 f"bad1.0   {self.bad1_0:8.3f} %",
                 f"invalid  {self.invalid:8.3f} %",
                 f"avgErr   {self.avg_err:8.4f} px",
                 f"stdErr   {self.std_err:8.4f} px"]
        lines += [f"{k:<8} {v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.as_dict().items()) + "\n"


def disparity_metrics(pred: np.ndarray, gt: np.ndarray, eval_mask: np.ndarray | None = None,
                      threshold: float = 1.0) -> MetricReport:
    """Middlebury-style metrics over pixels with valid ground truth (and ``eval_mask`` when given)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    evaluable = np.isfinite(gt)
    if eval_mask is not None:
        evaluable &= np.asarray(eval_mask) != 0
    n = int(evaluable.sum())
    if n == 0:
        raise EvaluationError("no evaluable pixels")
    valid = evaluable & np.isfinite(pred)
    nv = int(valid.sum())
    err = np.abs(pred[valid] - gt[valid])
    nbad = int((err > threshold).sum())
    return MetricReport(
        bad1_0=100.0 * nbad / n,
        invalid=100.0 * (n - nv) / n,
        avg_err=float(err.mean()) if nv else 0.0,
        std_err=float(err.std()) if nv else 0.0,
        counts={"evaluable": n, "valid": nv, "bad": nbad},
    )


def left_band_mask(shape, width: int) -> np.ndarray:
    """Mask excluding the ``width`` leftmost columns, where dense priors cannot be matched."""
    m = np.ones(shape, dtype=bool)
    m[:, : max(0, width)] = False
    return m


def heteroscedastic_loss(pred, delta, gt):
    """Mean-normalised ``E*exp(-delta)/2 + delta/2`` over valid ground-truth pixels.

    ``E`` is the squared disparity error and ``delta`` the predicted log
    variance. Returns the loss and the per-pixel terms (NaN where not evaluated).
    """
    pred = np.asarray(pred, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if not pred.shape == delta.shape == gt.shape:
        raise EvaluationError("prediction, log-variance and ground truth must share dimensions")
    ok = np.isfinite(gt) & np.isfinite(pred) & np.isfinite(delta)
    n = int(ok.sum())
    if n == 0:
        raise EvaluationError("no valid ground-truth pixels for the loss")
    e = (gt - pred) ** 2
    terms = np.full(gt.shape, np.nan)
    terms[ok] = (e[ok] * np.exp(-delta[ok]) + delta[ok]) / (2.0 * n)
    return float(terms[ok].sum()), terms


def heteroscedastic_loss_grad(pred, delta, gt) -> np.ndarray:
    """Derivative of the loss with respect to each ``delta``."""
    pred = np.asarray(pred, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    ok = np.isfinite(gt) & np.isfinite(pred) & np.isfinite(delta)
    n = int(ok.sum())
    g = np.zeros(gt.shape)
    e = (gt - pred) ** 2
    g[ok] = (1.0 - e[ok] * np.exp(-delta[ok])) / (2.0 * n)
    return g


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Calibration:
    focal_length: float
    baseline: float
    doffs: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.focal_length <= 0 or self.baseline <= 0:
            raise ValueError("focal length and baseline must be positive")


def read_middlebury_calib(path, baseline_unit: float = 1e-3) -> Calibration:
    """Parse a Middlebury ``calib.txt``; baselines are stored in mm and converted by ``baseline_unit``."""
    fields = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            fields[k.strip()] = v.strip()
    try:
        nums = [float(t) for t in re.findall(r"[-+0-9.eE]+", fields["cam0"])]
        return Calibration(focal_length=nums[0], baseline=float(fields["baseline"]) * baseline_unit,
                           doffs=float(fields.get("doffs", 0.0)), cx=nums[2], cy=nums[5])
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed calibration ({exc})") from exc


@dataclass
class PointCloud:
    points: np.ndarray
    scalar: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)


def disparity_to_cloud(disp: np.ndarray, calib: Calibration, stride: int = 1) -> PointCloud:
    disp = np.asarray(disp, dtype=np.float64)[::stride, ::stride]
    v, u = np.mgrid[0 : disp.shape[0], 0 : disp.shape[1]]
    u = u * stride
    v = v * stride
    den = disp + calib.doffs
    ok = np.isfinite(disp) & (den > 0)
    z = calib.focal_length * calib.baseline / den[ok]
    x = (u[ok] - calib.cx) * z / calib.focal_length
    y = (v[ok] - calib.cy) * z / calib.focal_length
    return PointCloud(np.column_stack([x, y, z]))


HIST_EDGES = np.round(np.arange(0, 51) * 0.001, 3)


@dataclass
class PlaneErrorResult:
    errors: np.ndarray
    evaluated: np.ndarray
    mean: float
    histogram: np.ndarray
    overflow: int

    @property
    def n_unevaluated(self) -> int:
        return int((~self.evaluated).sum())


def point_to_plane_error(pred: PointCloud, ref: PointCloud, radius: float = 0.05,
                         min_neighbors: int = 3, collinear_tol: float = 1e-6) -> PlaneErrorResult:
    """Distance from each predicted point to a plane fitted to reference points within ``radius``.

    The plane normal is the smallest-eigenvalue eigenvector of the neighbours'
    covariance. Points with fewer than ``min_neighbors`` neighbours, or whose
    neighbours are nearly collinear (middle eigenvalue below
    ``collinear_tol`` times the largest), are reported as unevaluated.
    """
    if len(ref) == 0:
        raise EvaluationError("reference cloud is empty")
    refp = np.asarray(ref.points, dtype=np.float64)
    tree = cKDTree(refp)
    pts = np.asarray(pred.points, dtype=np.float64)
    errors = np.full(len(pts), np.nan)
    evaluated = np.zeros(len(pts), dtype=bool)
    for i, nb in enumerate(tree.query_ball_point(pts, r=radius)):
        if len(nb) < min_neighbors:
            continue
        q = refp[nb]
        c = q.mean(axis=0)
        a = q - c
        evals, evecs = np.linalg.eigh(a.T @ a)
        if evals[1] <= collinear_tol * max(evals[2], np.finfo(float).tiny):
            continue
        errors[i] = abs(float(np.dot(pts[i] - c, evecs[:, 0])))
        evaluated[i] = True
    ev = errors[evaluated]
    hist, _ = np.histogram(ev[ev < HIST_EDGES[-1]], bins=HIST_EDGES)
    return PlaneErrorResult(errors, evaluated, float(ev.mean()) if ev.size else float("nan"),
                            hist, int((ev >= HIST_EDGES[-1]).sum()))


def histogram_text(res: PlaneErrorResult) -> str:
    lines = ["# point-to-plane error histogram, bins of 0.001 m",
             f"# evaluated {int(res.evaluated.sum())} unevaluated {res.n_unevaluated} mean {res.mean:.6f} m"]
    for a, b, n in zip(HIST_EDGES[:-1], HIST_EDGES[1:], res.histogram):
        lines.append(f"{a:.3f} {b:.3f} {n}")
    lines.append(f"{HIST_EDGES[-1]:.3f} inf {res.overflow}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# PLY


def error_colors(err: np.ndarray, cap: float = 0.05) -> np.ndarray:
    """Green-to-red ramp over ``[0, cap)``; errors at or above ``cap`` (and NaN) are pure red."""
    err = np.asarray(err, dtype=np.float64)
    t = np.clip(np.nan_to_num(err, nan=cap) / cap, 0.0, 1.0)
    rgb = np.zeros((len(err), 3), dtype=np.uint8)
    rgb[:, 0] = np.round(255 * t)
    rgb[:, 1] = np.round(255 * (1 - t))
    capped = ~(err < cap)
    rgb[capped] = (255, 0, 0)
    return rgb


def write_ply(cloud: PointCloud, path, color_by_error: bool = False, error_cap: float = 0.05) -> None:
    """Binary little-endian PLY with float32 xyz, plus the scalar and an error colour when requested."""
    pts = np.asarray(cloud.points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.scalar is not None:
        fields.append(("scalar", "<f4"))
    if color_by_error:
        if cloud.scalar is None:
            raise ValueError("colouring by error needs per-point errors in cloud.scalar")
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cloud.scalar is not None:
        rec["scalar"] = cloud.scalar
    if color_by_error:
        rgb = error_colors(cloud.scalar, error_cap)
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    types = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += [f"property {types[t]} {n}" for n, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> np.ndarray:
    """Read a binary little-endian vertex-only PLY into a structured array."""
    types = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1", "int": "<i4"}
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fields, n = [], 0
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of file")
            tok = line.decode("ascii").split()
            if tok[:1] == ["format"] and tok[1] != "binary_little_endian":
                raise ValueError(f"{path}: unsupported PLY format {tok[1]}")
            if tok[:2] == ["element", "vertex"]:
                n = int(tok[2])
            elif tok[:1] == ["property"]:
                fields.append((tok[2], types[tok[1]]))
            elif tok[:1] == ["end_header"]:
                break
        dtype = np.dtype(fields)
        data = f.read(dtype.itemsize * n)
    if len(data) < dtype.itemsize * n:
        raise ValueError(f"{path}: unexpected end of file")
    return np.frombuffer(data, dtype=dtype, count=n)
