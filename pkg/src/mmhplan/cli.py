"""Command-line entry point: ``mmhplan <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 file error,
4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .experiment import (
    cmd_acf,
    cmd_evaluate,
    cmd_infer,
    cmd_monte_carlo,
    cmd_nominal,
    cmd_plan,
    cmd_simulate,
)
from .mmh import ChainLengthError, InitializationError
from .ocp import SolverError
from .ode import IntegrationError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML experiment configuration")
    parser.add_argument("--seed", type=int, default=default, help="master seed (unsigned 64-bit)")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument("--full-scale", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="100 runs with 100 scenarios")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmhplan", description=(
        "Bayesian parameter and state inference with scenario-based glucose control."))
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="sample a patient and write a training dataset")
    p = sub.add_parser("infer", parents=[common], help="posterior samples at t=0 from a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p = sub.add_parser("plan", parents=[common], help="scenario plan from posterior samples")
    p.add_argument("--samples", type=Path, required=True)
    p = sub.add_parser("nominal", parents=[common], help="EKF plus nominal-model plan from a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p = sub.add_parser("evaluate", parents=[common], help="apply a control to a true patient")
    p.add_argument("--control", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p = sub.add_parser("monte-carlo", parents=[common], help="compare both planners over many patients")
    p.add_argument("--runs", type=int, default=None, help="override the configured run count")
    p.add_argument("--workers", type=int, default=None, help="worker processes")
    p.add_argument("--no-oracle", action="store_true", help="skip the perfect-information feasibility check")
    sub.add_parser("acf", parents=[common], help="autocorrelation of one long unthinned chain")
    sub.add_parser("config", parents=[common], help="print the effective configuration as TOML")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    if args.full_scale:
        cfg = cfg.full_scale()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "runs", None) is not None:
        changes["runs"] = args.runs
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return dataclasses.replace(cfg, **changes) if changes else cfg


def run(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    if args.command == "config":
        print(cfg.dumps(), end="")
    elif args.command == "simulate":
        case = cmd_simulate(cfg, out)
        print(f"wrote {out / 'dataset.csv'} ({case.dataset.M} measurements) and {out / 'truth.csv'}")
    elif args.command == "infer":
        post = cmd_infer(cfg, args.dataset, out)
        print(f"wrote {out / 'samples.csv'} ({len(post)} samples), acf.csv, acceptance.csv")
    elif args.command == "plan":
        _, report = cmd_plan(cfg, args.samples, out)
        print(f"{report.message}: cost={report.cost:.6g} max_violation={report.max_violation:.3g}")
        print(f"wrote {out / 'control.csv'} and {out / 'predictions.csv'}")
    elif args.command == "nominal":
        _, report = cmd_nominal(cfg, args.dataset, out)
        print(f"{report.message}: cost={report.cost:.6g} max_violation={report.max_violation:.3g}")
        print(f"wrote {out / 'control_nominal.csv'} and {out / 'ekf_trace.csv'}")
    elif args.command == "evaluate":
        ev = cmd_evaluate(cfg, args.control, args.truth, out)
        print(f"cost = {ev.cost:.6g}\nviolation = {int(ev.violation)}\nG_min = {ev.G_min:.4f}\nG_max = {ev.G_max:.4f}")
    elif args.command == "monte-carlo":
        _, text = cmd_monte_carlo(cfg, out, check_oracle=not args.no_oracle)
        print(text, end="")
    elif args.command == "acf":
        values = cmd_acf(cfg, out)
        print("lag-25 autocorrelation: " + " ".join(f"{v:.3f}" for v in values[min(25, len(values) - 1)]))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as err:
        print(f"error[config]: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error[io]: {err}", file=sys.stderr)
        return EXIT_IO
    except (IntegrationError, SolverError, InitializationError, ChainLengthError, FloatingPointError) as err:
        print(f"error[numerical]: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error[input]: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"error[internal]: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
