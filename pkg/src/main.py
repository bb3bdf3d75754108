import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.commands.base import EXIT_INCOMPLETE, EXIT_INVALID
from src.commands.direction import cmd_direction
from src.commands.estimate import cmd_estimate
from src.commands.simulate import cmd_simulate
from src.commands.summary import cmd_summary
from src.config import get_settings
from src.models.schemas import ErrorResponse, Estimator, RunCommand, RunConfig, Scenario, Technology
from src.services.dataset import DatasetError
from src.services.montecarlo import NonPositiveBase, ReplicationMismatch
from src.services.qp import DimensionMismatch, SolveError
from src.services.technologies import MissingEmissionFactors
from src.utils.logging import setup_logging

settings = get_settings()
logger = logging.getLogger(__name__)

COMMANDS = {
    RunCommand.ESTIMATE: cmd_estimate,
    RunCommand.SIMULATE: cmd_simulate,
    RunCommand.DIRECTION: cmd_direction,
    RunCommand.SUMMARY: cmd_summary,
}

def _floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")

def _technologies(text: str) -> List[Technology]:
    try:
        return [Technology(part.strip().upper()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"technology must be one of bp, jd, wgd, got {text!r}")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME,
        description="Emission-generating frontier estimation, shadow pricing and Monte Carlo benchmarking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration; flags override it")
    common.add_argument("--tech", type=_technologies, help="bp|jd|wgd, comma-separated for simulate")
    common.add_argument("--estimator", choices=[e.value for e in Estimator])
    common.add_argument("--tau", type=_floats, help="Quantile list, e.g. 0.05,0.20,0.35")
    common.add_argument("--input", type=Path)
    common.add_argument("--schema", type=Path, help="Column-role schema JSON")
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--seed", type=int)
    common.add_argument("--tol", type=float, help="Solver feasibility tolerance")
    common.add_argument("--normalized", action="store_true", default=None,
                        help="Estimate on min-max normalized data")

    sub.add_parser("estimate", parents=[common], help="Fit frontiers and price every DMU")
    sub.add_parser("direction", parents=[common], help="Print the selected direction vector")
    sub.add_parser("summary", parents=[common], help="Descriptive statistics of the input")

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo RMSE study")
    simulate.add_argument("--scenario", choices=["1", "2"])
    simulate.add_argument("--sigma", type=_floats, help="Inefficiency scales, e.g. 0.3,0.8,1.3")
    simulate.add_argument("--n", type=int, help="DMUs per replication")
    simulate.add_argument("--reps", type=int, help="Replications per cell")
    simulate.add_argument("--oracle", action="store_true", default=None, help="Score the true targets")
    simulate.add_argument("--s2-fixed-u-scale", type=float,
                          help="Hold the Scenario 2 output inefficiency scale fixed across the sigma sweep")
    return parser

def _flag_overrides(args: argparse.Namespace, command: RunCommand) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.tech is not None:
        if command == RunCommand.SIMULATE:
            overrides["technologies"] = args.tech
        elif len(args.tech) != 1:
            raise ValueError(f"{command.value} takes a single technology, got {len(args.tech)}")
        else:
            overrides["technology"] = args.tech[0]
    if args.estimator is not None:
        key = "estimators" if command == RunCommand.SIMULATE else "estimator"
        overrides[key] = [args.estimator] if command == RunCommand.SIMULATE else args.estimator

    simple = {
        "tau": "taus", "input": "input_path", "schema": "schema_path", "out_dir": "out_dir",
        "seed": "seed", "tol": "tol", "normalized": "use_normalized_data",
        "sigma": "sigmas", "n": "n_dmu", "reps": "n_reps", "oracle": "oracle",
        "s2_fixed_u_scale": "s2_fixed_u_scale",
    }
    for flag, field in simple.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "scenario", None) is not None:
        overrides["scenario"] = Scenario.S1 if args.scenario == "1" else Scenario.S2
    return overrides

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the JSON config file, which overrides Settings defaults"""
    command = RunCommand(args.command)
    merged: Dict[str, Any] = {
        "seed": settings.DEFAULT_SEED,
        "taus": list(settings.DEFAULT_TAUS),
        "tol": settings.FEASIBILITY_TOL,
        "use_normalized_data": settings.USE_NORMALIZED_DATA,
    }
    if args.config is not None:
        merged.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    merged.update(_flag_overrides(args, command))
    merged["command"] = command
    return RunConfig.model_validate(merged)

def _fail(message: str, exit_code: int) -> int:
    print(ErrorResponse(message=message, exit_code=exit_code).model_dump_json(), file=sys.stderr)
    return exit_code

def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)

    try:
        cfg = resolve_config(args)
        logger.info(f"Running {cfg.command.value} (seed {cfg.seed}, solver {settings.QP_SOLVER})")
        return COMMANDS[cfg.command](cfg)
    except (SolveError, NonPositiveBase, ReplicationMismatch) as e:
        logger.error(f"Run incomplete: {e}")
        return _fail(str(e), EXIT_INCOMPLETE)
    except ValidationError as e:
        errors = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        logger.error(f"Invalid configuration: {errors}")
        return _fail(f"Invalid configuration: {errors}", EXIT_INVALID)
    except (DatasetError, DimensionMismatch, MissingEmissionFactors, ValueError, OSError) as e:
        logger.error(f"Invalid input: {e}")
        return _fail(str(e), EXIT_INVALID)

if __name__ == "__main__":
    sys.exit(main())
