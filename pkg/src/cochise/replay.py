"""``cochise-replay``: read-only terminal rendering of a trajectory log."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

from cochise.log import LLM_EVENT_KEYS, LogError, TrajectoryEvent, read_run

MAX_GAP_SECONDS = 10.0
DISPLAY_LINES = 40
HEADER = "── #"

_COLORS = {
    "dim": "\033[2m",
    "bold": "\033[1m",
    "red": "\033[31m",
    "green": "\033[32m",
    "yellow": "\033[33m",
    "blue": "\033[34m",
    "magenta": "\033[35m",
    "cyan": "\033[36m",
    "reset": "\033[0m",
}

_EVENT_COLOR = {
    "run.start": "bold",
    "run.end": "bold",
    "planner.update_strategy": "blue",
    "planner.select_task": "blue",
    "ptt.update": "cyan",
    "executor.step": "magenta",
    "executor.summarize": "magenta",
    "reflexion.repair": "red",
    "cmd.execute": "green",
    "knowledge.finding": "yellow",
    "knowledge.account": "yellow",
    "task.start": "bold",
    "task.end": "bold",
}


@dataclass
class ReplayOptions:
    speed: float = 0.0
    event_filter: frozenset[str] | None = None
    show_prompts: bool = False
    task_filter: str | None = None
    full: bool = False

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")


@dataclass
class ReplaySummary:
    total: int = 0
    shown: int = 0
    filtered: int = 0
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class PttSnapshot:
    seq: int
    timestamp: str
    text: str


class _Painter:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __call__(self, text: str, color: str) -> str:
        if not self.enabled or color not in _COLORS:
            return text
        return f"{_COLORS[color]}{text}{_COLORS['reset']}"


def _clip_lines(text: str, full: bool) -> list[str]:
    lines = text.splitlines()
    if full or len(lines) <= DISPLAY_LINES:
        return lines
    return lines[:DISPLAY_LINES] + [f"... ({len(lines) - DISPLAY_LINES} more lines, --full shows all)"]


def _selected(event: TrajectoryEvent, options: ReplayOptions) -> bool:
    if options.event_filter is not None and event.event not in options.event_filter:
        return False
    if options.task_filter is not None and event.payload.get("task_id") != options.task_filter:
        return False
    return True


def render_event(event: TrajectoryEvent, options: ReplayOptions, paint: _Painter) -> list[str]:
    p = event.payload
    head = paint(f"{HEADER}{event.seq} {event.timestamp} {event.event}", _EVENT_COLOR.get(event.event, "bold"))
    body: list[str] = []

    def block(label: str, text: str) -> None:
        body.append(paint(label, "dim"))
        body.extend("    " + line for line in _clip_lines(text, options.full))

    if event.event == "run.start":
        cfg = p.get("config", {})
        body.append(f"harness {p.get('harness_version')}  planner {cfg.get('planner_model')}  "
                    f"executor {cfg.get('executor_model')}")
        body.append(f"scenario sha256 {cfg.get('scenario_sha256', '?')[:16]}  limits {cfg.get('limits')}")
    elif event.event == "run.end":
        totals = p.get("totals", {})
        body.append(f"reason: {p.get('reason')}  planner rounds: {p.get('planner_rounds')}")
        body.append(f"usd {totals.get('usd')}  accounts {totals.get('distinct_accounts')}  "
                    f"events {totals.get('total_events')}")
        if p.get("error"):
            body.append(paint(f"error: {p['error']}", "red"))
    elif event.event in LLM_EVENT_KEYS:
        cost = p.get("cost", {})
        body.append(
            f"model {p.get('model')}  {p.get('duration_ms')} ms  tokens in {cost.get('input_tokens')} "
            f"out {cost.get('output_tokens')} reasoning {cost.get('reasoning_tokens')} "
            f"cached {cost.get('cached_tokens')}  usd {cost.get('usd')}"
        )
        for key in ("task_id", "trigger", "parse_error"):
            if p.get(key):
                body.append(f"{key}: {p[key]}")
        if options.show_prompts:
            for msg in p.get("prompt", []):
                block(f"  [{msg.get('role')}]", msg.get("content", ""))
        block("  completion:", p.get("completion", ""))
    elif event.event == "ptt.update":
        body.extend("    " + line for line in p.get("ptt", "").splitlines())
    elif event.event == "planner.select_task":
        body.append(paint(f"task {p.get('task_id')}: {p.get('description')}", "bold"))
        if p.get("context"):
            block("  context:", p["context"])
    elif event.event == "cmd.execute":
        if p.get("timed_out"):
            badge = paint("[TIMEOUT]", "red")
        elif "exit_code" not in p:
            badge = paint("[NO EXIT]", "red")
        else:
            badge = paint(f"[exit {p['exit_code']}]", "green" if p["exit_code"] == 0 else "red")
        body.append(f"{badge} $ {p.get('cmd')}  ({p.get('duration_ms')} ms)")
        if p.get("stdout"):
            block("  stdout:" + (" (truncated in log)" if p.get("stdout_truncated") else ""), p["stdout"])
        if p.get("stderr"):
            block("  stderr:" + (" (truncated in log)" if p.get("stderr_truncated") else ""), p["stderr"])
    elif event.event == "knowledge.finding":
        body.append(paint(f"★ FINDING ({p.get('source')}): {p.get('text')}", "yellow"))
    elif event.event == "knowledge.account":
        tag = "new account" if p.get("new_identity") else "additional secret"
        body.append(paint(f"★ {tag}: {p.get('identity')} [{p.get('secret_kind')}] {p.get('secret')}", "yellow"))
    elif event.event == "task.start":
        body.append(paint(f"task {p.get('task_id')} (max {p.get('max_rounds')} rounds): {p.get('description')}", "bold"))
    elif event.event == "task.end":
        body.append(f"task {p.get('task_id')} {p.get('status')} after {p.get('rounds_used')} rounds")
        block("  summary:", p.get("summary", ""))
    return [head] + body


def replay(
    path: str | Path,
    options: ReplayOptions | None = None,
    out: TextIO | None = None,
    *,
    color: bool | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ReplaySummary:
    options = options or ReplayOptions()
    out = out or sys.stdout
    record = read_run(path)
    if color is None:
        color = hasattr(out, "isatty") and out.isatty()
    paint = _Painter(color)
    summary = ReplaySummary(total=len(record.events), warnings=list(record.warnings))
    previous: TrajectoryEvent | None = None
    for event in record.events:
        if not _selected(event, options):
            summary.filtered += 1
            continue
        if previous is not None and options.speed > 0:
            gap = (event.time - previous.time).total_seconds()
            sleep(min(max(gap, 0.0) * options.speed, MAX_GAP_SECONDS))
        out.write("\n".join(render_event(event, options, paint)) + "\n")
        summary.shown += 1
        previous = event
    return summary


def extract_ptt_history(path: str | Path) -> list[PttSnapshot]:
    return [
        PttSnapshot(e.seq, e.timestamp, e.payload["ptt"])
        for e in read_run(path).events
        if e.event == "ptt.update"
    ]


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cochise-replay", description="replay a captured trajectory log")
    parser.add_argument("log", help="run log (.jsonl or JSON array)")
    parser.add_argument("--speed", type=float, default=0.0,
                        help="0 = no delays, 1 = original timing (gaps capped at 10 s)")
    parser.add_argument("--events", help="comma-separated event keys to show")
    parser.add_argument("--task", help="only events of this task id")
    parser.add_argument("--show-prompts", action="store_true")
    parser.add_argument("--full", action="store_true", help="disable 40-line display truncation")
    args = parser.parse_args(argv)
    try:
        options = ReplayOptions(
            speed=args.speed,
            event_filter=frozenset(k.strip() for k in args.events.split(",") if k.strip()) if args.events else None,
            show_prompts=args.show_prompts,
            task_filter=args.task,
            full=args.full,
        )
        summary = replay(args.log, options)
        sys.stdout.flush()
    except (LogError, OSError, ValueError) as exc:
        print(f"cochise-replay: {exc}", file=sys.stderr)
        return 1
    for warning in summary.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(
        f"-- {summary.shown} shown, {summary.filtered} filtered, {summary.total} total"
        + (f", {len(summary.warnings)} warning(s)" if summary.warnings else ""),
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
