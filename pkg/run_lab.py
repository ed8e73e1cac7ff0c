#!/usr/bin/env python3
"""Entry point: initialize the environment, load a plan and run one lab command."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from initialize_lab_env import main as init_env
from lab_core import DEFAULT_PLAN, LabCore

logger = logging.getLogger(__name__)

COMMAND_NAMES = ("train", "bifurcate", "sweep", "merge", "hessian", "slice", "report")

# application config key -> (plan section, plan key)
CONFIG_TO_PLAN = {
    "workers": ("output", "workers"),
    "precision": ("output", "precision"),
    "charts": ("output", "charts"),
    "csv_digits": ("output", "digits"),
    "checked_mode": ("train", "checked"),
    "bn_eps": ("arch", "bn_eps"),
    "transition_tau_rel": ("analysis", "tau_rel"),
    "transition_floor": ("analysis", "floor"),
    "hessian_sample_size": ("analysis", "hessian_samples"),
    "hessian_k": ("analysis", "hessian_k"),
}


def plan_base(cfg: dict[str, Any]) -> dict[str, dict[str, Any]]:
    """Application-config values that act as plan defaults."""
    base: dict[str, dict[str, Any]] = {}
    for key, (section, plan_key) in CONFIG_TO_PLAN.items():
        if key in cfg:
            base.setdefault(section, {})[plan_key] = cfg[key]
    base.setdefault("output", {})["dir"] = str(Path(cfg.get("runs_dir", "runs")) / "desk")
    return base


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Model-merging lab: train, branch, merge and report")
    parser.add_argument("command", choices=COMMAND_NAMES, help="Lab command to run")
    parser.add_argument("--plan", type=Path, default=None, help=f"Plan file (default {DEFAULT_PLAN} when it exists)")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Global seed")
    parser.add_argument("--workers", type=int, default=None, help="Parallel grid cells")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=None, help="Floating-point width")
    parser.add_argument("--charts", type=_on_off, default=None, help="Render charts (on|off)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    init_env([])
    core = LabCore()
    core.configure_logging()
    cfg = core.get_app_config()

    # heavy imports after logging is in place
    from mergelab.commands import EXIT_FAILED, EXIT_USAGE, run_command
    from mergelab.plan import PlanError, load_plan

    plan_path = args.plan
    if plan_path is None and DEFAULT_PLAN.exists():
        plan_path = DEFAULT_PLAN
    try:
        plan = load_plan(plan_path, base=plan_base(cfg))
        plan = plan.with_overrides(
            dir=args.out,
            seed=args.seed,
            workers=args.workers,
            precision=args.precision,
            charts=args.charts,
        )
    except (PlanError, FileNotFoundError) as exc:
        logger.error("Plan rejected: %s", exc)
        return EXIT_USAGE
    logger.info("Running %s with plan %s into %s", args.command, plan.source or "<defaults>", plan.out_dir)
    try:
        return run_command(args.command, plan)
    except FileNotFoundError as exc:
        logger.error("Missing input: %s", exc)
        return EXIT_FAILED
    except Exception:  # noqa: BLE001
        logger.exception("Command %s failed", args.command)
        return EXIT_FAILED


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(1)
