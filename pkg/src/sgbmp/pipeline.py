"""Run configuration, artifact writing and the end-to-end commands behind the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, evaluation, imaging, prior, sgm, synth
from .cost import MatcherParams

log = logging.getLogger(__name__)

# keys that name files rather than tuning values
PATH_KEYS = ("left", "right", "gt", "mask", "prior_y", "prior_sigma", "prior_logvar", "prior_meta",
             "pred", "disp", "calib", "ref", "cases")
# informational manifest entries accepted (and ignored) in config files
META_KEYS = ("command", "version")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
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
    raw_intensity_term: bool = False
    directions: int = 8
    weight_mode: str = "attenuation"
    lambda_b: float = 3.0
    lambda_s: float = 0.1
    lambda_d: float = 0.1
    downsample: int = 4
    interpolation: str = "bilinear"
    prior_source: str = "pyramid"
    allow_any_num_disp: bool = False
    threads: int = 1
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        if self.num_disparities % 16 and not self.allow_any_num_disp:
            raise ConfigError(f"num_disparities must be a multiple of 16 (got {self.num_disparities}); "
                              "set allow_any_num_disp to override")
        if self.prior_source not in ("pyramid", "files"):
            raise ConfigError(f"prior_source must be 'pyramid' or 'files', got {self.prior_source!r}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"interpolation must be 'bilinear' or 'nearest', got {self.interpolation!r}")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if self.lambda_b <= 0:
            raise ConfigError("lambda_b must be > 0")
        try:
            self.matcher()
            self.aggregation()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def matcher(self) -> MatcherParams:
        names = {f.name for f in dataclasses.fields(MatcherParams)}
        return MatcherParams(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def aggregation(self) -> sgm.AggregationConfig:
        return sgm.AggregationConfig(self.directions, self.weight_mode, self.lambda_s, self.lambda_d)

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            k = k.replace("-", "_")
            if k in META_KEYS:
                continue
            if k not in types:
                raise ConfigError(f"unknown configuration key {k!r}")
            kw[k] = _coerce(k, v, types[k])
        return cls(**kw)


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    try:
        if typ == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise imaging.ImageIOError(path, f"cannot read config ({exc.strerror or exc})") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, _, v = line.partition("=")
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: PipelineConfig, inputs: dict) -> Path:
    """Record command, full configuration and input digests in config-file syntax.

    Passing the manifest back through ``--config`` re-runs the same case.
    """
    lines = [f"# sgbmp {__version__} run manifest", f"command = {command}", f"version = {__version__}"]
    for k, v in dataclasses.asdict(config).items():
        lines.append(f"{k} = {v}")
    for k, p in inputs.items():
        if p is None:
            continue
        lines.append(f"{k} = {Path(p).resolve()}")
        lines.append(f"# sha256 {k} {sha256(p)}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# rendering


def colorize(disp: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Jet-style colour image of a disparity map; invalid pixels are black."""
    d = np.asarray(disp, dtype=np.float64)
    ok = np.isfinite(d)
    if vmin is None or vmax is None:
        vals = d[ok]
        vmin = float(vals.min()) if vals.size else 0.0
        vmax = float(vals.max()) if vals.size else 1.0
    t = np.clip((np.where(ok, d, vmin) - vmin) / max(vmax - vmin, 1e-12), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    rgb = np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    rgb[~ok] = 0
    return rgb


def write_disparity(out_dir: Path, disp: np.ndarray, gt: np.ndarray | None = None) -> None:
    imaging.save_pfm(disp, out_dir / "disp.pfm")
    if gt is not None and np.isfinite(gt).any():
        g = gt[np.isfinite(gt)]
        imaging.save_png(colorize(disp, float(g.min()), float(g.max())), out_dir / "disp_color.png")
    else:
        imaging.save_png(colorize(disp), out_dir / "disp_color.png")


def write_metrics(out_dir: Path, report: evaluation.MetricReport, title: str) -> None:
    (out_dir / "metrics.txt").write_text(report.to_text(title))
    (out_dir / "metrics.kv").write_text(report.to_kv())


def _load_pair(left, right):
    L = imaging.load_gray(left)
    R = imaging.load_gray(right)
    if L.shape != R.shape:
        raise ConfigError(f"left {L.shape} and right {R.shape} images differ in size")
    return L, R


def _maybe_gt(gt, shape):
    if gt is None:
        return None
    g = imaging.load_pfm(gt)
    if g.shape != shape:
        raise ConfigError(f"ground truth {g.shape} does not match images {shape}")
    return g


def _out(config: PipelineConfig) -> Path:
    p = Path(config.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# commands


def cmd_sgbm(left, right, config: PipelineConfig, gt=None, mask=None) -> dict:
    out = _out(config)
    L, R = _load_pair(left, right)
    g = _maybe_gt(gt, L.shape)
    disp = sgm.run_sgbm(L, R, config.matcher(), config.aggregation(), workers=config.threads)
    write_disparity(out, disp, g)
    result = {"disparity": disp}
    if g is not None:
        m = imaging.load_gray(mask) if mask else None
        rep = evaluation.disparity_metrics(disp, g, m)
        write_metrics(out, rep, f"sgbm uniqueness_ratio={config.uniqueness_ratio}")
        result["metrics"] = rep
    write_manifest(out, "sgbm", config, {"left": left, "right": right, "gt": gt, "mask": mask})
    return result


def infer_factor(full_shape, prior_shape) -> int:
    h, w = full_shape
    ph, pw = prior_shape
    f = max(1, round(w / pw))
    if -(-w // f) != pw or -(-h // f) != ph:
        raise ConfigError(f"prior size {prior_shape} is not an integer down-sampling of {full_shape}")
    return f


def cmd_prior(left, right, config: PipelineConfig) -> prior.PriorField:
    out = _out(config)
    L, R = _load_pair(left, right)
    pr = prior.pyramid_prior(L, R, config.matcher(), config.downsample, config.lambda_b,
                             config=config.aggregation(), workers=config.threads)
    prior.save_prior(pr, out)
    write_manifest(out, "prior", config, {"left": left, "right": right})
    return pr


def cmd_sgbmp(left, right, config: PipelineConfig, gt=None, mask=None, prior_y=None, prior_sigma=None,
              prior_logvar=None, prior_meta=None) -> dict:
    out = _out(config)
    L, R = _load_pair(left, right)
    g = _maybe_gt(gt, L.shape)
    params = config.matcher()
    if prior_meta:
        pr = prior.load_prior_meta(prior_meta)
    elif prior_y:
        if (prior_sigma is None) == (prior_logvar is None):
            raise ConfigError("give exactly one of prior_sigma and prior_logvar with prior_y")
        pr = prior.load_prior(prior_y, prior_logvar or prior_sigma, is_log_variance=prior_logvar is not None)
        pr.factor = infer_factor(L.shape, pr.y.shape)
    elif config.prior_source == "files":
        raise ConfigError("prior_source=files needs prior_y/prior_sigma or prior_meta")
    else:
        pr = prior.pyramid_prior(L, R, params, config.downsample, config.lambda_b,
                                 config=config.aggregation(), workers=config.threads)
    res = sgm.guided_match(L, R, params, pr, config.aggregation(), config.lambda_b,
                           workers=config.threads, interpolation=config.interpolation)
    write_disparity(out, res.disparity, g)
    imaging.save_pfm(res.prior.y, out / "prior_y.pfm")
    imaging.save_pfm(res.prior.sigma, out / "prior_sigma.pfm")
    imaging.save_pfm(res.filtered_y, out / "filtered_y.pfm")
    imaging.save_pfm(res.ppsr.width.astype(np.float32), out / "ppsr_width.pfm")
    imaging.save_pgm(res.occlusion * 255, out / "occlusion.pgm")
    result = {"disparity": res.disparity, "guided": res}
    if g is not None:
        m = imaging.load_gray(mask) if mask else None
        rep = evaluation.disparity_metrics(res.disparity, g, m)
        write_metrics(out, rep, f"sgbmp weight_mode={config.weight_mode}")
        result["metrics"] = rep
    write_manifest(out, "sgbmp", config, {"left": left, "right": right, "gt": gt, "mask": mask,
                                          "prior_y": prior_y, "prior_sigma": prior_sigma,
                                          "prior_logvar": prior_logvar, "prior_meta": prior_meta})
    return result


def cmd_eval(pred, gt, config: PipelineConfig, mask=None, left_band: int = 0) -> evaluation.MetricReport:
    out = _out(config)
    p = imaging.load_pfm(pred)
    g = imaging.load_pfm(gt)
    m = None
    if mask:
        m = imaging.load_gray(mask) != 0
    if left_band:
        band = evaluation.left_band_mask(g.shape, left_band)
        m = band if m is None else (m & band)
    rep = evaluation.disparity_metrics(p, g, m)
    write_metrics(out, rep, f"eval {Path(pred).name}")
    write_manifest(out, "eval", config, {"pred": pred, "gt": gt, "mask": mask})
    return rep


def cmd_cloud(disp, calib: evaluation.Calibration, config: PipelineConfig, ref=None, radius: float = 0.05,
              stride: int = 1, calib_path=None, error_cap: float = 0.05):
    out = _out(config)
    d = imaging.load_pfm(disp)
    cloud = evaluation.disparity_to_cloud(d, calib, stride)
    result = {"cloud": cloud}
    if ref is not None:
        r = evaluation.read_ply(ref)
        ref_cloud = evaluation.PointCloud(np.column_stack([r["x"], r["y"], r["z"]]).astype(np.float64))
        res = evaluation.point_to_plane_error(cloud, ref_cloud, radius)
        cloud = evaluation.PointCloud(cloud.points, res.errors)
        evaluation.write_ply(cloud, out / "cloud.ply", color_by_error=True, error_cap=error_cap)
        (out / "plane_error.txt").write_text(evaluation.histogram_text(res))
        (out / "plane_error.kv").write_text(
            f"mean={res.mean:.6g} evaluated={int(res.evaluated.sum())} unevaluated={res.n_unevaluated} "
            f"overflow={res.overflow}\n")
        result["error"] = res
    else:
        evaluation.write_ply(cloud, out / "cloud.ply")
    write_manifest(out, "cloud", config, {"disp": disp, "calib": calib_path, "ref": ref})
    return result


def cmd_synth(kind: str, config: PipelineConfig, width: int = 256, height: int = 256, disparity: int = 12,
              foreground: int | None = None) -> synth.SyntheticPair:
    out = _out(config)
    kw = {} if foreground is None or kind == "shift" else {"foreground": foreground}
    pair = synth.make_pair(kind, (height, width), disparity, config.seed, **kw)
    imaging.save_png(pair.left, out / "left.png")
    imaging.save_png(pair.right, out / "right.png")
    imaging.save_pfm(pair.gt, out / "gt.pfm")
    imaging.save_png(pair.nonocc.astype(np.uint8) * 255, out / "nonocc.png")
    write_manifest(out, "synth", config, {})
    return pair


def read_cases(path) -> list[dict]:
    """Batch case list: one ``name left right [gt]`` line per case, relative paths resolved against the file."""
    base = Path(path).parent
    cases = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) not in (3, 4):
            raise ConfigError(f"{path}:{n}: expected 'name left right [gt]'")
        case = {"name": tok[0], "left": str(base / tok[1]), "right": str(base / tok[2])}
        case["gt"] = str(base / tok[3]) if len(tok) == 4 else None
        cases.append(case)
    return cases


def _run_case(method: str, case: dict, config: PipelineConfig):
    cfg = dataclasses.replace(config, out=str(Path(config.out) / case["name"]), threads=1)
    fn = cmd_sgbm if method == "sgbm" else cmd_sgbmp
    res = fn(case["left"], case["right"], cfg, gt=case["gt"])
    rep = res.get("metrics")
    return case["name"], rep.as_dict() if rep else None


def cmd_batch(cases_path, method: str, config: PipelineConfig) -> list:
    from concurrent.futures import ProcessPoolExecutor

    if method not in ("sgbm", "sgbmp"):
        raise ConfigError(f"batch method must be sgbm or sgbmp, got {method!r}")
    cases = read_cases(cases_path)
    out = _out(config)
    if config.threads <= 1:
        results = [_run_case(method, c, config) for c in cases]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_run_case, [method] * len(cases), cases, [config] * len(cases)))
    lines = []
    for name, m in results:
        kv = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in (m or {}).items())
        lines.append(f"case={name} {kv}".rstrip())
    (out / "batch.kv").write_text("\n".join(lines) + "\n")
    return results

