"""``cochise`` command line entry point."""

from __future__ import annotations

import argparse
import itertools
import logging
import sys

from cochise import __version__
from cochise.config import ConfigError, load_config
from cochise.llm import load_script
from cochise.log import LogError, SteppingClock, deterministic_run_ids
from cochise.orchestrator import run

FIXED_CLOCK_START = "2025-01-01T00:00:00Z"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cochise", description="planner/executor agent harness")
    parser.add_argument("--version", action="version", version=f"cochise {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one run and write its trajectory log")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--scenario", help="scenario prompt file (defaults to the mock fixture's scenario)")
    p.add_argument("--planner-model")
    p.add_argument("--executor-model")
    p.add_argument("--log-dir")
    p.add_argument("--max-budget", type=str, metavar="USD")
    p.add_argument("--max-planner-rounds", type=int)
    p.add_argument("--executor-max-rounds", type=int)
    p.add_argument("--max-wallclock-minutes", type=float)
    p.add_argument("--mock-testbed", metavar="FIXTURE", help="use a fixture testbed instead of SSH")
    p.add_argument("--scripted-llm", metavar="SCRIPT", help="answer LLM calls from a script file")
    p.add_argument(
        "--fixed-clock", nargs="?", const=FIXED_CLOCK_START, metavar="ISO",
        help=f"deterministic clock (1 s per reading) and run id; default start {FIXED_CLOCK_START}",
    )
    p.add_argument("--run-id", help="explicit run id")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    overrides = {
        "scenario": args.scenario,
        "planner_model": args.planner_model,
        "executor_model": args.executor_model,
        "log_dir": args.log_dir,
        "max_usd_budget": args.max_budget,
        "max_planner_rounds": args.max_planner_rounds,
        "executor_max_rounds": args.executor_max_rounds,
        "max_wallclock_minutes": args.max_wallclock_minutes,
        "mock_testbed": args.mock_testbed,
        "scripted_llm": args.scripted_llm,
    }
    try:
        defaults = {}
        if args.scripted_llm:
            model = load_script(args.scripted_llm).get("model")
            if model:
                defaults["planner_model"] = model
        config = load_config(args.config, overrides=overrides, defaults=defaults)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"cochise: configuration error: {exc}", file=sys.stderr)
        return 1

    clock = run_ids = None
    if args.fixed_clock:
        clock = SteppingClock(args.fixed_clock)
        seed = args.run_id or args.fixed_clock
        run_ids = deterministic_run_ids(seed)
    if args.run_id:
        run_ids = itertools.chain([args.run_id], deterministic_run_ids(args.run_id))

    try:
        outcome = run(config, clock=clock, run_ids=run_ids)
    except (ConfigError, LogError, OSError, ValueError) as exc:
        print(f"cochise: {exc}", file=sys.stderr)
        return 1
    t = outcome.totals
    print(f"run {outcome.run_id}: {outcome.reason}")
    print(f"log: {outcome.log_path}")
    print(
        f"events {t.total_events}, accounts {t.distinct_accounts}, tokens in/out/reasoning/cached "
        f"{t.input_tokens}/{t.output_tokens}/{t.reasoning_tokens}/{t.cached_tokens}, usd {t.usd}"
    )
    if outcome.error:
        print(f"error: {outcome.error}", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
