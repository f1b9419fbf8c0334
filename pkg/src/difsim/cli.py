"""Command-line entry point: ``difsim``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Dict, Optional, Sequence

from loguru import logger
from pydantic import ValidationError

from difsim.config import ExperimentConfig, default_log_level
from difsim.graph import run_experiment, run_sweep
from difsim.metrics import summarize_sweep
from difsim.scenarios import SCENARIOS, scenario_check

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2

# argparse dest -> ExperimentConfig field
_OVERRIDES = {
    "k": "k",
    "scheduler": "scheduler",
    "pattern": "pattern",
    "duration": "duration_s",
    "seed": "seed",
    "metric_mode": "metric_mode",
    "delta": "delta",
    "delta_fraction": "delta_link_fraction",
    "out_dir": "out_dir",
    "link_gbps": "link_gbps",
    "validate_bounds": "validate_bounds",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difsim",
        description="Packet-level fat-tree simulator comparing DiFS against ECMP.",
    )
    parser.add_argument("--k", type=int, help="switch port count (even, >= 4)")
    parser.add_argument("--scheduler", choices=["difs", "ecmp"])
    parser.add_argument("--pattern", help="stride:I, stag:PE:PP, random, randx:X, randbij or shuffle[:SIZE]")
    parser.add_argument("--duration", type=float, help="simulated seconds")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--metric-mode", dest="metric_mode", choices=["count", "measured_rate"])
    parser.add_argument("--delta", type=float, help="imbalance threshold in flows")
    parser.add_argument(
        "--delta-fraction",
        dest="delta_fraction",
        type=float,
        help="measured-rate threshold as a fraction of link capacity",
    )
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--link-gbps", dest="link_gbps", type=float)
    parser.add_argument(
        "--validate-bounds",
        dest="validate_bounds",
        action="store_true",
        default=None,
        help="check balance bounds at steady state; exit 1 on violation",
    )
    parser.add_argument("--config", help="JSON file with ExperimentConfig fields")
    parser.add_argument(
        "--scenario",
        choices=[*SCENARIOS, "all"],
        help="run a scripted collision check instead of an experiment",
    )
    parser.add_argument("--sweep-seeds", dest="sweep_seeds", type=int, help="run N consecutive seeds")
    parser.add_argument("--workers", type=int, help="worker processes for --sweep-seeds")
    parser.add_argument("--log-level", dest="log_level", default=None)
    return parser


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config from ``--config`` (if any) with command-line values layered on top."""
    values: Dict[str, Any] = {}
    if args.config:
        values = ExperimentConfig.from_json_file(args.config).model_dump()
    for dest, name in _OVERRIDES.items():
        value = getattr(args, dest)
        if value is not None:
            values[name] = value
    return ExperimentConfig.model_validate(values)


def _report_validation(exc: ValidationError) -> None:
    for err in exc.errors():
        field = ".".join(str(p) for p in err["loc"]) or "config"
        logger.error("invalid {}: {}", field, err["msg"])


def _run_scenarios(name: str, args: argparse.Namespace) -> int:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.link_gbps is not None:
        overrides["link_gbps"] = args.link_gbps
    names = list(SCENARIOS) if name == "all" else [name]
    results = [scenario_check(n, **overrides) for n in names]
    print(json.dumps([r.to_dict() for r in results], indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def _run_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    configs = [
        cfg.model_copy(update={"seed": cfg.seed + i}) for i in range(args.sweep_seeds)
    ]
    summaries = run_sweep(configs, max_workers=args.workers, out_dir=cfg.out_dir)
    table = summarize_sweep(summaries)
    print(table.to_string(index=False))
    failed = [s["label"] for s in summaries if s.get("bounds", {}).get("passed") is False]
    if failed:
        logger.error("bounds violated in: {}", ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or default_log_level())

    try:
        if args.scenario:
            return _run_scenarios(args.scenario, args)
        cfg = load_config(args)
    except ValidationError as exc:
        _report_validation(exc)
        return EXIT_INVALID

    if args.sweep_seeds:
        return _run_sweep(cfg, args)

    report = run_experiment(cfg)
    print(json.dumps(report.summary, indent=2, default=str))
    if cfg.validate_bounds and not report.summary.get("bounds", {}).get("passed", True):
        return EXIT_FAILED
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
