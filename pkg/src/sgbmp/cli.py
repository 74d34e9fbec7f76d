"""Command-line entry point: ``sgbmp {sgbm,sgbmp,prior,eval,cloud,synth,batch}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, evaluation, pipeline
from .pipeline import ConfigError, PipelineConfig

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4

# flag dest -> PipelineConfig field
_TUNING = {
    "min_disp": "min_disparity",
    "num_disp": "num_disparities",
    "block_size": "block_size",
    "p1": "p1",
    "p2": "p2",
    "prefilter_cap": "prefilter_cap",
    "uniqueness_ratio": "uniqueness_ratio",
    "disp12_max_diff": "disp12_max_diff",
    "speckle_window": "speckle_window",
    "speckle_range": "speckle_range",
    "cost_scale_divisor": "cost_scale_divisor",
    "raw_intensity": "raw_intensity_term",
    "directions": "directions",
    "weight_mode": "weight_mode",
    "lambda_b": "lambda_b",
    "lambda_s": "lambda_s",
    "lambda_d": "lambda_d",
    "downsample": "downsample",
    "interpolation": "interpolation",
    "prior_source": "prior_source",
    "allow_any_num_disp": "allow_any_num_disp",
    "threads": "threads",
    "seed": "seed",
    "out": "out",
}


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="key = value file; explicit flags override it")
    g.add_argument("--out", help="output directory")
    g.add_argument("--min-disp", type=int)
    g.add_argument("--num-disp", type=int)
    g.add_argument("--allow-any-num-disp", action="store_const", const=True)
    g.add_argument("--block-size", type=int)
    g.add_argument("--p1", type=int)
    g.add_argument("--p2", type=int)
    g.add_argument("--prefilter-cap", type=int)
    g.add_argument("--uniqueness-ratio", type=int)
    g.add_argument("--disp12-max-diff", type=float)
    g.add_argument("--speckle-window", type=int)
    g.add_argument("--speckle-range", type=float)
    g.add_argument("--cost-scale-divisor", type=int)
    g.add_argument("--raw-intensity", action="store_const", const=True, help="add BT on raw intensities")
    g.add_argument("--directions", type=int, choices=(4, 8))
    g.add_argument("--weight-mode", choices=("off", "literal", "attenuation"))
    g.add_argument("--lambda-b", type=float)
    g.add_argument("--lambda-s", type=float)
    g.add_argument("--lambda-d", type=float)
    g.add_argument("--downsample", type=int, help="prior resolution factor")
    g.add_argument("--interpolation", choices=("bilinear", "nearest"))
    g.add_argument("--threads", type=int)
    g.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgbmp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sgbm", help="baseline full-range SGBM")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--gt")
    p.add_argument("--mask")
    _common(p)

    p = sub.add_parser("sgbmp", help="prior-guided SGBM")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--gt")
    p.add_argument("--mask")
    p.add_argument("--prior-y", help="prior disparity PFM")
    p.add_argument("--prior-sigma", help="prior standard deviation PFM")
    p.add_argument("--prior-logvar", help="prior log-variance PFM (alternative to --prior-sigma)")
    p.add_argument("--prior-meta", help="prior sidecar file written by 'sgbmp prior'")
    p.add_argument("--prior-source", choices=("pyramid", "files"))
    _common(p)

    p = sub.add_parser("prior", help="coarse-to-fine prior from down-sampled images")
    p.add_argument("--left")
    p.add_argument("--right")
    _common(p)

    p = sub.add_parser("eval", help="disparity metrics against ground truth")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--mask")
    p.add_argument("--left-band", type=int, default=0, help="exclude this many leftmost columns")
    _common(p)

    p = sub.add_parser("cloud", help="reproject disparity to a point cloud")
    p.add_argument("--disp")
    p.add_argument("--calib", help="Middlebury calib.txt")
    p.add_argument("--focal", type=float)
    p.add_argument("--baseline", type=float, help="metres")
    p.add_argument("--doffs", type=float, default=0.0)
    p.add_argument("--cx", type=float, default=0.0)
    p.add_argument("--cy", type=float, default=0.0)
    p.add_argument("--ref", help="reference cloud (binary PLY)")
    p.add_argument("--radius", type=float, default=0.05)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--error-cap", type=float, default=0.05, help="errors at or above this (m) are drawn red")
    _common(p)

    p = sub.add_parser("synth", help="synthetic stereo pair with ground truth")
    p.add_argument("--kind", choices=("shift", "step", "rds"), default="shift")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--disparity", type=int, default=12)
    p.add_argument("--foreground", type=int)
    _common(p)

    p = sub.add_parser("batch", help="run many cases concurrently")
    p.add_argument("--cases", help="file of 'name left right [gt]' lines")
    p.add_argument("--method", choices=("sgbm", "sgbmp"), default="sgbmp")
    _common(p)
    return parser


def resolve(args: argparse.Namespace) -> tuple[PipelineConfig, dict]:
    """Merge defaults, the config file and explicit flags; also returns file paths from either source."""
    values = pipeline.read_config_file(args.config) if args.config else {}
    paths = {k: values.pop(k) for k in list(values) if k in pipeline.PATH_KEYS}
    for dest, key in _TUNING.items():
        v = getattr(args, dest, None)
        if v is not None:
            if dest == "weight_mode" and v == "literal":
                v = "literal_eq4"
            values[key] = v
    for k in pipeline.PATH_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            paths[k] = v
    return PipelineConfig.from_mapping(values), paths


def _need(paths: dict, *keys):
    missing = [k for k in keys if not paths.get(k)]
    if missing:
        raise ConfigError("missing required input(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def run(args: argparse.Namespace) -> int:
    config, paths = resolve(args)
    cmd = args.command
    if cmd in ("sgbm", "sgbmp", "prior"):
        _need(paths, "left", "right")
    if cmd == "sgbm":
        res = pipeline.cmd_sgbm(paths["left"], paths["right"], config, paths.get("gt"), paths.get("mask"))
    elif cmd == "sgbmp":
        res = pipeline.cmd_sgbmp(paths["left"], paths["right"], config, paths.get("gt"), paths.get("mask"),
                                 paths.get("prior_y"), paths.get("prior_sigma"), paths.get("prior_logvar"),
                                 paths.get("prior_meta"))
    elif cmd == "prior":
        pipeline.cmd_prior(paths["left"], paths["right"], config)
        res = {}
    elif cmd == "eval":
        _need(paths, "pred", "gt")
        rep = pipeline.cmd_eval(paths["pred"], paths["gt"], config, paths.get("mask"), args.left_band)
        res = {"metrics": rep}
    elif cmd == "cloud":
        _need(paths, "disp")
        if paths.get("calib"):
            calib = evaluation.read_middlebury_calib(paths["calib"])
        elif args.focal and args.baseline:
            calib = evaluation.Calibration(args.focal, args.baseline, args.doffs, args.cx, args.cy)
        else:
            raise ConfigError("cloud needs --calib or --focal and --baseline")
        res = pipeline.cmd_cloud(paths["disp"], calib, config, paths.get("ref"), args.radius, args.stride,
                                 paths.get("calib"), args.error_cap)
        if "error" in res:
            print(f"point-to-plane mean error {res['error'].mean:.6f} m "
                  f"({int(res['error'].evaluated.sum())} evaluated, {res['error'].n_unevaluated} unevaluated)")
    elif cmd == "synth":
        pipeline.cmd_synth(args.kind, config, args.width, args.height, args.disparity, args.foreground)
        res = {}
    elif cmd == "batch":
        _need(paths, "cases")
        pipeline.cmd_batch(paths["cases"], args.method, config)
        res = {}
    else:  # pragma: no cover - argparse restricts the choices
        raise ConfigError(f"unknown command {cmd}")
    if res.get("metrics") is not None:
        sys.stdout.write(res["metrics"].to_kv())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (evaluation.EvaluationError, ArithmeticError) as exc:
        print(f"sgbmp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"sgbmp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"sgbmp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
