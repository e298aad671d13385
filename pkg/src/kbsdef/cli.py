"""Command-line entry point: ``kbsdef run|list-models|validate|oracle kalman``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness.config import FILTERS, ConfigError, ExperimentConfig, load_config
from .harness.experiment import FAILURE_THRESHOLD, TruthGenerationError, run_experiment
from .models import MODELS, OBSERVATIONS

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 2, 3

_MODEL_HELP = {
    "synthetic": "2-D synthetic drift (alpha, sigma)",
    "lennard-jones": "atom in a Lennard-Jones well (a, b, sigma)",
    "lorenz96": "Lorenz-96 with cyclic indices (d, f, sigma)",
    "ou": "Ornstein-Uhlenbeck, linear-Gaussian test bed (d, theta, sigma)",
}


def _add_overrides(p: argparse.ArgumentParser, filters: bool = True) -> None:
    p.add_argument("config", help="path to an experiment INI file")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--repeats", type=int, help="override the repeat count")
    p.add_argument("--out", help="output directory (default: [output] dir)")
    if filters:
        p.add_argument("--filters", help=f"comma-separated subset of {','.join(FILTERS)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbsdef", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log filter failures and progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_overrides(sub.add_parser("run", help="run an experiment and write CSV files"))
    sub.add_parser("list-models", help="list state and observation models")
    _add_overrides(sub.add_parser("validate", help="parse and check a config without running it"))
    oracle = sub.add_parser("oracle", help="reference solutions")
    oracle_sub = oracle.add_subparsers(dest="oracle", required=True)
    _add_overrides(oracle_sub.add_parser("kalman", help="exact Kalman filter on a linear-Gaussian config"),
                   filters=False)
    return parser


def _load(args, filters: tuple | None = None) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.repeats is not None:
        changes["repeats"] = args.repeats
    if args.out is not None:
        changes["out_dir"] = args.out
    if filters is not None:
        changes["filters"] = filters
    elif getattr(args, "filters", None):
        changes["filters"] = tuple(f.strip() for f in args.filters.split(",") if f.strip())
    return cfg.replace(**changes) if changes else cfg


def _run(cfg: ExperimentConfig) -> int:
    try:
        result = run_experiment(cfg)
    except TruthGenerationError as exc:
        print(f"error: truth generation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    for name in cfg.filters:
        print(f"{name}: accumulated RMSE {result.accumulated[name]:.6g} "
              f"({result.failures[name]}/{cfg.repeats} repeats failed)")
    print(f"wrote {cfg.out_dir}")
    if result.exceeded_failure_threshold:
        print(f"error: more than {FAILURE_THRESHOLD:.0%} of repeats failed", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")

    if args.command == "list-models":
        for name in MODELS:
            print(f"{name:15s} {_MODEL_HELP.get(name, '')}")
        print("observations: " + ", ".join(OBSERVATIONS))
        return EXIT_OK

    try:
        cfg = _load(args, ("kalman",) if args.command == "oracle" else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"ok: {cfg.name} ({cfg.model_name}, {cfg.n_steps} steps, {cfg.repeats} repeats, "
              f"filters {','.join(cfg.filters)})")
        return EXIT_OK
    return _run(cfg)


if __name__ == "__main__":
    sys.exit(main())
