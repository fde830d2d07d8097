"""Command-line front end: size, analyze, simulate, sweep and reproduce trial designs."""

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from backend.config import DEFAULT_THREADS, LOG_LEVEL
from backend.errors import ConfigError, InfeasibleError, ReproductionMismatchError, TrialDesignError
from backend.reporting import (
    format_comparison_summary,
    format_infeasible,
    operating_characteristics_frame,
    render,
    sizing_frame,
    write_frame,
)
from backend.reproduce import (
    TARGETS,
    analyze_design,
    assert_reproduced,
    conservative_type1_surface,
    ni_type1_curve,
    reproduce,
    size_config,
)
from backend.scenarios import ScenarioConfig, parse_config
from backend.simulator import operating_characteristics, sweep_grid
from backend.sizing import DesignKind

logger = logging.getLogger("trialdesign")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3


def _load(args) -> ScenarioConfig:
    config = parse_config(args.config)
    if getattr(args, "design", None):
        config = config.with_design(args.design)
    if args.seed is not None or args.replicates is not None:
        sim = config.simulation
        config = dataclasses.replace(
            config,
            simulation=dataclasses.replace(
                sim,
                seed=sim.seed if args.seed is None else args.seed,
                replicates=sim.replicates if args.replicates is None else args.replicates,
            ),
        )
    return config


def _emit(frame, args, name: str):
    print(render(frame, args.format))
    if args.out:
        write_frame(frame, Path(args.out) / f"{name}.csv")


def cmd_size(args) -> int:
    config = _load(args)
    try:
        result = size_config(config)
    except InfeasibleError as exc:
        print(format_infeasible(exc, config.design), file=sys.stderr)
        return EXIT_INFEASIBLE
    _emit(sizing_frame([result]), args, "size")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.which == "figA1":
        frame = ni_type1_curve(np.logspace(-2, 2, 201))
    elif args.which == "figA2":
        frame = conservative_type1_surface(np.logspace(np.log10(0.05), np.log10(20.0), 50))
    else:
        if not args.config:
            raise ConfigError("config", "analyze design needs a scenario")
        frame = analyze_design(_load(args))
    _emit(frame, args, f"analyze_{args.which}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _load(args)
    plan = config.simulation_plan(hypothesis_state=args.state)
    started = time.perf_counter()
    oc = operating_characteristics(plan, threads=args.threads or config.simulation.threads)
    _emit(operating_characteristics_frame(plan, oc, time.perf_counter() - started), args, "simulate")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    if config.grid is None:
        raise ConfigError("grid", "sweep needs a grid block")
    reps = args.replicates if args.replicates is not None else config.grid.reps_per_cell
    plan = config.simulation_plan(hypothesis_state=args.state, replicates=reps)
    frame = sweep_grid(
        plan,
        config.grid.lambda_P.values(),
        config.grid.lambda_A.values(),
        reps,
        threads=args.threads or config.simulation.threads,
    )
    _emit(frame, args, "sweep")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    report = reproduce(
        args.target,
        out_root=Path(args.out) if args.out else None,
        seed=args.seed,
        replicates=args.replicates,
        reps_per_cell=args.reps_per_cell,
        threads=args.threads or DEFAULT_THREADS,
    )
    if args.format == "csv":
        print(render(report.comparison, "csv"))
    else:
        print(format_comparison_summary(report.target, report.comparison))
        print(f"Outputs written to {report.out_dir} ({report.runtime_seconds:.1f}s)")
    assert_reproduced(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Master seed for Monte Carlo sub-streams")
    common.add_argument("--replicates", type=int, help="Monte Carlo replicates (per cell for the sweep command)")
    common.add_argument("--out", help="Directory to write CSV outputs to")
    common.add_argument("--format", choices=["csv", "table"], default="table")
    common.add_argument("--threads", type=int, help="Worker processes for the simulation engine")
    common.add_argument("--log-level", default=LOG_LEVEL)

    parser = argparse.ArgumentParser(
        prog="trialdesign",
        description="Design and evaluate active-controlled HIV prevention trials with a counterfactual placebo.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    designs = [k.value for k in DesignKind]

    p = sub.add_parser("size", parents=[common], help="Size the configured design")
    p.add_argument("config", help="Scenario YAML path or built-in name")
    p.add_argument("--design", choices=designs)
    p.set_defaults(func=cmd_size)

    p = sub.add_parser("analyze", parents=[common], help="Analytic type-1 error and power")
    p.add_argument("which", choices=["figA1", "figA2", "design"])
    p.add_argument("config", nargs="?")
    p.add_argument("--design", choices=designs)
    p.set_defaults(func=cmd_analyze)

    for name, func, text in (
        ("simulate", cmd_simulate, "Empirical rejection rate at the design parameters"),
        ("sweep", cmd_sweep, "Rejection rates over the configured (lambda_P, lambda_A) grid"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("config")
        p.add_argument("--design", choices=designs)
        p.add_argument("--state", choices=["null", "alternative"])
        p.set_defaults(func=func)

    p = sub.add_parser("reproduce", parents=[common], help="Re-run a bundled table or figure")
    p.add_argument("target", choices=TARGETS)
    p.add_argument("--reps-per-cell", type=int, help="Replicates per grid cell for sweep targets")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=str(args.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.replicates is not None and args.replicates < 1:
        print("error: --replicates must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "reps_per_cell", None) is not None and args.reps_per_cell < 1:
        print("error: --reps-per-cell must be at least 1", file=sys.stderr)
        return EXIT_CONFIG

    logger.debug("Running %s", args.command)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(format_infeasible(exc, getattr(args, "design", None) or args.command), file=sys.stderr)
        return EXIT_INFEASIBLE
    except ReproductionMismatchError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISMATCH
    except TrialDesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
