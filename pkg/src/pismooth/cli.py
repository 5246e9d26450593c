"""Command-line entry point.

Subcommands: run (execute a config file), experiment (one of the shipped
named experiments), compare (join marginals across output directories),
validate-config.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure.  Worker count for parallel repeats comes from --threads or the
PISMOOTH_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import parse_config
from .errors import ConfigError, GridMismatchError, NumericalError, PismoothError
from .experiments import EXPERIMENT_NAMES, run_config, run_experiment
from .metrics_io import join_marginals, write_comparison

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pismooth",
        description="Smoothing for hidden diffusion processes "
        "(adaptive path-integral smoother and particle baselines).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="per-iteration progress lines")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a config file")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, help="override run.seed")
    run_p.add_argument("--out", help="override run.out_dir")
    run_p.add_argument("--threads", type=int, help="parallel repeat workers")

    exp_p = sub.add_parser("experiment", help="run a shipped experiment")
    exp_p.add_argument("name", choices=EXPERIMENT_NAMES)
    exp_p.add_argument("--method", choices=("apis", "fs", "ffbsi", "kalman"),
                       help="restrict to one method")
    exp_p.add_argument("--seed", type=int)
    exp_p.add_argument("--out", default=None)
    exp_p.add_argument("--threads", type=int)
    exp_p.add_argument("--N", type=int, dest="particles", help="forward particles")
    exp_p.add_argument("--eta", type=float, help="learning rate")
    exp_p.add_argument("--J", type=int, dest="num_obs", help="number of observations")
    exp_p.add_argument("--Imax", type=int, dest="max_iters", help="iteration budget")
    exp_p.add_argument("--yT", type=float, dest="terminal_obs",
                       help="terminal observation value (lq-unlikely)")
    exp_p.add_argument("--M", type=int, dest="backward_particles", help="backward trajectories")
    exp_p.add_argument("--theta", type=float, dest="ess_stop", help="raw-ESS stopping threshold")
    exp_p.add_argument("--prior", choices=("gaussian", "delta"), help="initial law (neural5)")
    exp_p.add_argument("--R", type=int, dest="repeats", help="independent repeats")

    cmp_p = sub.add_parser("compare", help="join marginals across run directories")
    cmp_p.add_argument("dirs", nargs="+")
    cmp_p.add_argument("--out", default="comparison.csv")

    val_p = sub.add_parser("validate-config", help="check a config file against the schema")
    val_p.add_argument("config")
    return parser


def _thread_count(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("PISMOOTH_THREADS", "1"))


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.run["seed"] = args.seed
    out = args.out or cfg.run.get("out_dir")
    run_dirs = run_config(cfg, out, threads=_thread_count(args))
    print("\n".join(run_dirs))
    return EXIT_OK


def _cmd_experiment(args) -> int:
    out_root = args.out or os.path.join("runs", args.name)
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "particles", "eta", "num_obs", "max_iters",
                    "terminal_obs", "backward_particles", "ess_stop", "prior", "repeats")
        if getattr(args, key) is not None
    }
    if args.method is not None:
        overrides["methods"] = (args.method,)
    produced = run_experiment(args.name, out_root, threads=_thread_count(args), **overrides)
    for method, dirs in produced.items():
        print(f"{method}: {', '.join(dirs)}")
    return EXIT_OK


def _label(path: str) -> str:
    parts = os.path.normpath(path).split(os.sep)
    if parts[-1].startswith("run_") and len(parts) > 1:
        return "/".join(parts[-2:])
    return parts[-1]


def _cmd_compare(args) -> int:
    names = [_label(d) for d in args.dirs]
    if len(set(names)) != len(names):
        names = [os.path.normpath(d) for d in args.dirs]
    rows = join_marginals(args.dirs, names)
    write_comparison(args.out, rows)
    print(args.out)
    return EXIT_OK


def _cmd_validate(args) -> int:
    parse_config(args.config)
    print(f"{args.config}: ok")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handlers = {
        "run": _cmd_run,
        "experiment": _cmd_experiment,
        "compare": _cmd_compare,
        "validate-config": _cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, GridMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PismoothError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
