"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Numeric libraries are imported only after ``--threads`` has set
the BLAS and OpenMP thread variables.
"""

from __future__ import annotations

import argparse
import os
import sys

VERBS = ("simulate", "featurize", "train", "forecast", "riskneutralize", "checksurface", "evaluate", "backtest",
         "report", "pipeline")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out-dir", help="override run.out_dir")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP threads (default: run.threads)")
    parser = argparse.ArgumentParser(prog="neurojump", description="Jump-diffusion density forecasting workbench")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "simulate": "simulate asset paths (skipped when data.daily_csv is set)",
        "featurize": "build feature CSVs from daily and intraday files",
        "train": "fit the neural model and both baselines",
        "forecast": "write P-measure forecasts for the test block",
        "riskneutralize": "convert neural forecasts to the pricing measure",
        "checksurface": "price call grids and run static no-arbitrage checks",
        "evaluate": "score forecasts and run risk backtests",
        "backtest": "run the portfolio strategies",
        "report": "write model-by-metric CSV tables",
        "pipeline": "run every stage in order",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], help=helps[verb])
        if verb == "train":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--renormalize", dest="renormalize", action="store_true", default=None,
                           help="renormalized truncated likelihood")
            g.add_argument("--no-renormalize", dest="renormalize", action="store_false",
                           help="raw truncated likelihood")
        if verb == "riskneutralize":
            p.add_argument("--mode", choices=("drift-shift", "esscher"), help="override riskneutral.mode")
    return parser


def _configure(args):
    from .config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out_dir is not None:
        run["out_dir"] = args.out_dir
    return cfg.with_overrides(run=run) if run else cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)

    from ..errors import NeuroJumpError

    try:
        cfg = _configure(args)
        if args.threads is None:
            for var in THREAD_VARS:
                os.environ.setdefault(var, str(cfg.run.threads))
        from . import pipeline

        if args.verb == "pipeline":
            _, manifest = pipeline.run_pipeline(cfg, log=lambda m: print(m, file=sys.stderr))
            print(f"{len(manifest['artifacts'])} artifacts written to {cfg.run.out_dir}")
            return 0
        options = {}
        if args.verb == "train" and args.renormalize is not None:
            options["renormalize"] = args.renormalize
        if args.verb == "riskneutralize" and args.mode:
            options["mode"] = args.mode
        outputs = pipeline.run_stage(cfg, args.verb, **options)
        for p in outputs:
            print(p)
        return 0
    except NeuroJumpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
