"""Run metrics, per-model aggregates, table export and graph series.

Backs the ``cochise-analyze-logs`` and ``cochise-analyze-graphs`` commands.
Per-run rates use that run's own wall-clock (``run.start`` to ``run.end``);
per-model spread is the sample standard deviation (n - 1).
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape, quoteattr

from cochise.log import (
    LLM_EVENT_KEYS,
    LogError,
    TrajectoryEvent,
    account_identity,
    cost_of,
    elapsed_ms,
    format_usd,
    read_run,
)

MS_PER_HOUR = Decimal(3_600_000)
GRAPH_KINDS = ("cumulative-cost", "cumulative-accounts", "tokens-per-round")
TABLE_FORMATS = ("latex", "csv", "plain")
MISSING = "—"


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# goals


@dataclass(frozen=True)
class GoalSpec:
    """``domain:<realm>`` needs any account in that realm; ``account:<d>\\<u>`` one identity."""

    goals: tuple[str, ...]

    def __post_init__(self):
        if not self.goals:
            raise AnalysisError("goal spec is empty")
        for goal in self.goals:
            self._split(goal)

    @staticmethod
    def _split(goal: str) -> tuple[str, str]:
        kind, sep, value = goal.partition(":")
        kind, value = kind.strip().lower(), value.strip()
        if not sep or kind not in ("domain", "account") or not value:
            raise AnalysisError(f"bad goal {goal!r} (expected domain:<realm> or account:<domain>\\<user>)")
        if kind == "account":
            domain, slash, user = value.replace("\\\\", "\\").partition("\\")
            if not slash or not user:
                raise AnalysisError(f"bad account goal {goal!r}")
            return kind, account_identity(domain, user)
        return kind, value.lower()

    def matched(self, identities: Iterable[str]) -> bool:
        identities = set(identities)
        domains = {i.partition("\\")[0] for i in identities}
        for goal in self.goals:
            kind, value = self._split(goal)
            if kind == "domain" and value not in domains:
                return False
            if kind == "account" and value not in identities:
                return False
        return True

    @classmethod
    def parse(cls, text: str) -> "GoalSpec":
        lines = [line.split("#", 1)[0].strip() for line in text.splitlines()]
        return cls(tuple(line for line in lines if line))

    @classmethod
    def load(cls, path: str | Path) -> "GoalSpec":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# per-run metrics


@dataclass(frozen=True)
class RunMetrics:
    run_id: str
    model: str
    duration_hours: Decimal
    distinct_accounts: int
    total_usd: Decimal
    accounts_per_hour: Decimal
    usd_per_hour: Decimal
    usd_per_account: Decimal | None
    input_tokens: int = 0
    output_tokens: int = 0
    reasoning_tokens: int = 0
    cached_tokens: int = 0
    success: bool | None = None
    crashed: bool = False


def _identity(payload: dict) -> str:
    identity = payload.get("identity")
    if identity:
        return identity.lower()
    return account_identity(payload.get("domain", ""), payload["username"])


def compute_run_metrics(events: Sequence[TrajectoryEvent], goal_spec: GoalSpec | None = None) -> RunMetrics:
    """Metrics of one run.  Without ``run.end`` the run counts up to its last
    event and is flagged ``crashed``.  When no goal spec is passed the one
    recorded in the run's configuration (if any) is used."""
    events = list(events)
    if not events:
        raise AnalysisError("empty run")
    start = events[0]
    if start.event != "run.start":
        raise AnalysisError("run does not begin with run.start")
    end = events[-1]
    crashed = end.event != "run.end"
    duration_ms = elapsed_ms(start.time, end.time)
    if duration_ms <= 0:
        raise AnalysisError(f"run {start.run_id} has zero duration")
    hours = Decimal(duration_ms) / MS_PER_HOUR

    identities: set[str] = set()
    usd = Decimal(0)
    tokens = [0, 0, 0, 0]
    for event in events:
        cost = cost_of(event)
        if cost is not None:
            usd += cost.usd
            tokens[0] += cost.input_tokens
            tokens[1] += cost.output_tokens
            tokens[2] += cost.reasoning_tokens
            tokens[3] += cost.cached_tokens
        if event.event == "knowledge.account":
            identities.add(_identity(event.payload))

    config = start.payload.get("config", {})
    if goal_spec is None and config.get("goal_spec"):
        goal_spec = GoalSpec(tuple(config["goal_spec"]))
    accounts = len(identities)
    return RunMetrics(
        run_id=start.run_id,
        model=str(config.get("planner_model", "unknown")),
        duration_hours=hours,
        distinct_accounts=accounts,
        total_usd=usd,
        accounts_per_hour=accounts / hours,
        usd_per_hour=usd / hours,
        usd_per_account=usd / accounts if accounts else None,
        input_tokens=tokens[0],
        output_tokens=tokens[1],
        reasoning_tokens=tokens[2],
        cached_tokens=tokens[3],
        success=goal_spec.matched(identities) if goal_spec else None,
        crashed=crashed,
    )


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float
    n: int = 1

    @classmethod
    def of(cls, values: Sequence[float]) -> "MeanStd":
        values = [float(v) for v in values]
        n = len(values)
        if n == 0:
            raise AnalysisError("no values")
        mean = math.fsum(values) / n
        if n == 1:
            return cls(mean, 0.0, 1)
        var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
        return cls(mean, math.sqrt(var), n)

    def render(self) -> str:
        return f"{_two(self.mean)} +/- {_two(self.std)}"


@dataclass(frozen=True)
class ModelAggregate:
    model: str
    n_runs: int
    accounts_per_hour: MeanStd
    usd_per_hour: MeanStd
    usd_per_account: MeanStd | None = None
    success_rate: float | None = None

    def __post_init__(self):
        if self.n_runs < 1:
            raise AnalysisError("an aggregate needs at least one run")


def aggregate_by_model(runs: Sequence[RunMetrics]) -> list[ModelAggregate]:
    """Group runs by model in first-appearance order.  Cost per account is
    the mean of per-run ratios over runs that compromised anything."""
    groups: dict[str, list[RunMetrics]] = {}
    for metrics in runs:
        groups.setdefault(metrics.model, []).append(metrics)
    out = []
    for model, group in groups.items():
        per_account = [m.usd_per_account for m in group if m.usd_per_account is not None]
        scored = [m.success for m in group if m.success is not None]
        out.append(
            ModelAggregate(
                model=model,
                n_runs=len(group),
                accounts_per_hour=MeanStd.of([m.accounts_per_hour for m in group]),
                usd_per_hour=MeanStd.of([m.usd_per_hour for m in group]),
                usd_per_account=MeanStd.of(per_account) if per_account else None,
                success_rate=sum(scored) / len(group) if scored else None,
            )
        )
    return out


# ---------------------------------------------------------------------------
# tables


def _two(value: float) -> str:
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _latex_escape(text: str) -> str:
    for ch in "\\&%$#_{}":
        text = text.replace(ch, "\\" + ch)
    return text


def _rows(aggregates: Sequence[ModelAggregate]) -> tuple[list[str], list[list[str]]]:
    with_success = any(a.success_rate is not None for a in aggregates)
    header = ["Model", "Accounts/h", "Cost/h", "Cost/Account"] + (["Success-rate"] if with_success else []) + ["n"]
    rows = []
    for a in aggregates:
        row = [
            a.model,
            a.accounts_per_hour.render(),
            a.usd_per_hour.render(),
            a.usd_per_account.render() if a.usd_per_account else MISSING,
        ]
        if with_success:
            row.append(_two(a.success_rate) if a.success_rate is not None else MISSING)
        row.append(str(a.n_runs))
        rows.append(row)
    return header, rows


def export_table(aggregates: Sequence[ModelAggregate], fmt: str = "latex") -> str:
    if not aggregates:
        raise AnalysisError("nothing to export")
    if fmt not in TABLE_FORMATS:
        raise AnalysisError(f"unknown table format {fmt!r}")
    header, rows = _rows(aggregates)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "plain":
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in [header] + rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(line.rstrip() for line in lines) + "\n" + _FOOTNOTE + "\n"

    names = [_latex_escape(r[0]) for r in rows]
    width = max(len(n) for n in names)
    out = [
        "\\begin{tabular}{l" + "r" * (len(header) - 1) + "}",
        "  \\toprule",
        "  " + " & ".join(header) + " \\\\",
        "  \\midrule",
    ]
    for name, row in zip(names, rows):
        out.append("  " + " & ".join([name.ljust(width)] + row[1:]) + " \\\\")
    out += ["  \\bottomrule", "\\end{tabular}", "% " + _FOOTNOTE]
    return "\n".join(out) + "\n"


_FOOTNOTE = ("+/- is the sample standard deviation (n-1) over runs; an account is a distinct "
             "compromised domain\\user identity; Cost/Account is the mean of per-run ratios.")


# ---------------------------------------------------------------------------
# graph series


def _seconds(ms: int) -> str:
    return f"{ms / 1000:.3f}"


def graph_series(events: Sequence[TrajectoryEvent], kind: str) -> list[tuple[int, str]]:
    """(elapsed_ms, value) points, one per contributing event."""
    if kind not in GRAPH_KINDS:
        raise AnalysisError(f"unknown graph kind {kind!r}")
    if not events:
        return []
    start = events[0].time
    points: list[tuple[int, str]] = []
    if kind == "cumulative-cost":
        total = Decimal(0)
        for e in events:
            cost = cost_of(e)
            if cost is not None:
                total += cost.usd
                points.append((elapsed_ms(start, e.time), format_usd(total)))
    elif kind == "cumulative-accounts":
        seen: set[str] = set()
        for e in events:
            if e.event == "knowledge.account":
                seen.add(_identity(e.payload))
                points.append((elapsed_ms(start, e.time), str(len(seen))))
    else:
        # a round opens at each planner strategy call and holds every LLM
        # call up to the next one (bootstrap calls count as round 0)
        rounds: list[list] = []
        for e in events:
            cost = cost_of(e)
            if e.event == "planner.update_strategy" or (cost is not None and not rounds):
                rounds.append([elapsed_ms(start, e.time), 0])
            if cost is not None and e.event in LLM_EVENT_KEYS:
                rounds[-1][1] += cost.input_tokens + cost.output_tokens + cost.reasoning_tokens
        points = [(at, str(tokens)) for at, tokens in rounds]
    return points


def write_series_csv(path: Path, points: Sequence[tuple[int, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["elapsed_seconds", "value"])
        for at, value in points:
            writer.writerow([_seconds(at), value])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
_Y_LABELS = {"cumulative-cost": "cumulative cost (USD)", "cumulative-accounts": "distinct accounts",
             "tokens-per-round": "tokens per planner round"}


def render_svg(series: Sequence[tuple[str, Sequence[tuple[int, str]]]], kind: str) -> str:
    width, height = 720, 420
    left, right, top, bottom = 70, 180, 30, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    max_x = max((at for _, pts in series for at, _ in pts), default=0) / 1000 or 1.0
    max_y = max((float(v) for _, pts in series for _, v in pts), default=0.0) or 1.0

    def sx(ms: int) -> str:
        return f"{left + (ms / 1000) / max_x * plot_w:.2f}"

    def sy(value: str) -> str:
        return f"{top + plot_h - float(value) / max_y * plot_h:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f"<title>{escape(kind)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.0f}" y="{height - 12}" text-anchor="middle">elapsed seconds</text>',
        f'<text x="16" y="{top + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + plot_h / 2:.0f})">{escape(_Y_LABELS[kind])}</text>',
        f'<text x="{left}" y="{top + plot_h + 16}" text-anchor="middle">0</text>',
        f'<text x="{left + plot_w}" y="{top + plot_h + 16}" text-anchor="middle">{max_x:.0f}</text>',
        f'<text x="{left - 6}" y="{top + plot_h}" text-anchor="end">0</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end">{max_y:.4g}</text>',
    ]
    for i, (run_id, pts) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(at)},{sy(v)}" for at, v in pts) or f"{left},{top + plot_h}"
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                   f"<title>{escape(run_id)}</title></polyline>")
        ly = top + 14 + i * 16
        out.append(f'<rect x="{width - right + 10}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{width - right + 26}" y="{ly}" data-run={quoteattr(run_id)}>{escape(run_id[:24])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class GraphOutput:
    svg: Path
    csvs: list[Path] = field(default_factory=list)


def emit_graph_series(logs: Sequence[str | Path], kind: str, out_dir: str | Path) -> GraphOutput:
    """Write one ``<run_id>.<kind>.csv`` per run and one ``<kind>.svg`` overlay."""
    if kind not in GRAPH_KINDS:
        raise AnalysisError(f"unknown graph kind {kind!r}")
    if not logs:
        raise AnalysisError("no logs given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = []
    result = GraphOutput(out_dir / f"{kind}.svg")
    for log in logs:
        events = read_run(log).events
        if not events:
            raise AnalysisError(f"{log}: empty log")
        points = graph_series(events, kind)
        run_id = events[0].run_id
        csv_path = out_dir / f"{run_id}.{kind}.csv"
        write_series_csv(csv_path, points)
        result.csvs.append(csv_path)
        series.append((run_id, points))
    result.svg.write_text(render_svg(series, kind), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# command line


def collect_logs(paths: Iterable[str]) -> list[Path]:
    found: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            found.extend(sorted(p for p in path.iterdir() if p.suffix in (".jsonl", ".json") and p.is_file()))
        else:
            found.append(path)
    return found


def analyze_logs_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cochise-analyze-logs", description="per-model run metrics")
    parser.add_argument("paths", nargs="+", help="log files or directories of logs")
    parser.add_argument("--format", choices=TABLE_FORMATS, default="plain")
    parser.add_argument("--goals", help="goal spec file (one matcher per line)")
    parser.add_argument("--out", help="write the table here instead of stdout")
    args = parser.parse_args(argv)
    try:
        goals = GoalSpec.load(args.goals) if args.goals else None
    except (OSError, AnalysisError) as exc:
        print(f"cochise-analyze-logs: {exc}", file=sys.stderr)
        return 1
    runs = []
    for path in collect_logs(args.paths):
        try:
            record = read_run(path)
            for warning in record.warnings:
                print(f"warning: {path}: {warning}", file=sys.stderr)
            metrics = compute_run_metrics(record.events, goals)
        except (OSError, LogError, AnalysisError) as exc:
            print(f"skipping {path}: {exc}", file=sys.stderr)
            continue
        if metrics.crashed:
            print(f"warning: {path}: no run.end, counted up to its last event", file=sys.stderr)
        runs.append(metrics)
    if not runs:
        print("cochise-analyze-logs: no usable logs", file=sys.stderr)
        return 1
    table = export_table(aggregate_by_model(runs), args.format)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    return 0


def analyze_graphs_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cochise-analyze-graphs", description="graph series from run logs")
    parser.add_argument("paths", nargs="+", help="log files or directories of logs")
    parser.add_argument("--kind", choices=GRAPH_KINDS, required=True)
    parser.add_argument("--out-dir", required=True)
    args = parser.parse_args(argv)
    try:
        result = emit_graph_series(collect_logs(args.paths), args.kind, args.out_dir)
    except (OSError, LogError, AnalysisError) as exc:
        print(f"cochise-analyze-graphs: {exc}", file=sys.stderr)
        return 1
    print(result.svg)
    for path in result.csvs:
        print(path)
    return 0
