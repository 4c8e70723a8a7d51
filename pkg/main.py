import sys
import logging
import argparse
import warnings
from dataclasses import replace
from pathlib import Path
from dotenv import load_dotenv
from typing import List

from ltv_sentinel.exceptions import (
    ConfigError,
    DimensionError,
    DivergenceError,
    LtvSentinelError,
    UsageError,
)
from ltv_sentinel.helpers import get_files_in_dir, write_files_atomic
from ltv_sentinel.logger import LOG_LEVELS, setup_logger, share_handlers
from ltv_sentinel.scenarios import builtin_scenarios
from utils.config_utils import Scenario, load_scenario, load_yaml, parse_scenario
from utils.dataframe_utils import to_json
from utils.enums import FilterKind, exit_codes
from utils.experiment_utils import (
    ExperimentConfig,
    calibrate,
    compare_detectors,
    detect_outputs,
    paper_config,
    reproduce_paper,
    simulate_outputs,
)

SUBCOMMANDS = ("simulate", "detect", "reproduce-paper", "compare", "calibrate-threshold")
SEEDED_COMMANDS = ("simulate", "detect")


class CliParser(argparse.ArgumentParser):
    """Argument parser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CliParser:
    parser = CliParser(prog="ltv-sentinel", description="Fault detection on Kalman and H-infinity filter innovations")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    for command in SUBCOMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", required=command != "reproduce-paper", help="YAML scenario, run manifest, or a built-in scenario name (paper, step)")
        sub.add_argument("--out", default="out", help="Output directory")
        sub.add_argument("--seed", type=int, help="Seed override for simulate and detect")
        sub.add_argument("--filter", choices=[kind.value for kind in FilterKind])
        sub.add_argument("--alpha", type=float)
        sub.add_argument("--tau", type=float)
        sub.add_argument("--window", type=int)
        sub.add_argument("--seeds", type=int, help="Run seeds 0..N-1")
        sub.add_argument("-v", "--verbosity", choices=list(LOG_LEVELS), default="warning")
    return parser


def apply_overrides(scenario: Scenario, args: argparse.Namespace) -> Scenario:
    spec = scenario.filter
    if args.alpha is not None:
        spec = spec.with_alpha(args.alpha)
    if args.filter is not None:
        spec = replace(spec, kind=FilterKind(args.filter))
    detector = scenario.detector
    if args.tau is not None:
        detector = replace(detector, tau=args.tau)
    if args.window is not None:
        detector = replace(detector, window=args.window)
    experiment = dict(scenario.experiment)
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError(f"--seeds must be positive, got {args.seeds}")
        experiment["seeds"] = list(range(args.seeds))
    return replace(scenario, filter=spec, detector=detector, experiment=experiment)


def resolve_scenario(args: argparse.Namespace) -> Scenario:
    if args.config is None:
        return apply_overrides(paper_config(), args)
    path = Path(args.config)
    if not path.is_file():
        if args.config in builtin_scenarios:
            return apply_overrides(parse_scenario(load_yaml(builtin_scenarios[args.config])), args)
        raise UsageError(f"Config file not found: {path}")
    return apply_overrides(load_scenario(path), args)


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (UsageError, ConfigError, DimensionError)):
        return exit_codes["usage"]
    if isinstance(error, DivergenceError):
        return exit_codes["divergence"]
    return exit_codes["numerical"]


def run_command(args: argparse.Namespace, logger: logging.Logger) -> List[Path]:
    if args.seed is not None and args.command not in SEEDED_COMMANDS:
        raise UsageError(f"--seed applies to simulate and detect only; use --seeds or the experiment section for {args.command}")
    scenario = resolve_scenario(args)
    if args.command == "simulate":
        files = simulate_outputs(scenario, args.seed)
    elif args.command == "detect":
        files = detect_outputs(scenario, args.seed, args.tau)
    elif args.command == "reproduce-paper":
        files = reproduce_paper(scenario=scenario)
    elif args.command == "compare":
        compare_detectors(ExperimentConfig.from_scenario(scenario), out_dir=args.out)
        return get_files_in_dir(args.out)
    else:
        tau = calibrate(scenario, scenario.filter)
        print(f"{tau:.17g}")
        files = {"calibration.json": to_json({"filter": scenario.filter.name, "tau": tau})}
    written = write_files_atomic(args.out, files)
    logger.debug(f"Wrote {len(written)} files to {args.out}")
    return written


def run_cli(argv: List[str] = None, logger=None) -> int:
    """Runs one workflow and returns the process exit code.

    Args:
        argv (List[str]): Arguments without the program name. Defaults to sys.argv[1:] (optional).
        logger (logging.Logger): Logger instance for logging. Defaults to None (optional).

    Returns:
        int: 0 on success, 1 on usage or config errors, 2 on numerical errors, 3 on divergence.
    """
    logger = logger or logging.getLogger("main")
    try:
        args = build_parser().parse_args(argv)
        logger.setLevel(LOG_LEVELS[args.verbosity])
        share_handlers(logger)
        for path in run_command(args, logger):
            print(path)
    except SystemExit as e:
        return int(e.code or 0)
    except (LtvSentinelError, ValueError) as e:
        code = exit_code_for(e) if isinstance(e, LtvSentinelError) else exit_codes["usage"]
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return code
    return exit_codes["ok"]


if __name__ == "__main__":
    warnings.filterwarnings("ignore")
    load_dotenv()
    logger = setup_logger("main", level="debug")

    sys.exit(run_cli(sys.argv[1:], logger=logger))
