"""End-to-end acceptance gate: one test per criterion, each reporting a
PASS/FAIL line (collected into the terminal summary)."""

import contextlib
import hashlib
import json
import math
import statistics
import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from collections import defaultdict
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from cochise.analysis import MeanStd, ModelAggregate, RunMetrics, aggregate_by_model, compute_run_metrics, emit_graph_series, export_table
from cochise.channel import ChannelDescriptor, SSHChannel
from cochise.knowledge import KnowledgeStore
from cochise.llm import ModelPrice, PriceTable, compute_cost
from cochise.log import CostMetrics, SteppingClock, deterministic_run_ids, open_run, read_run, summarize_run
from cochise.replay import ReplayOptions, replay

from conftest import ACCEPTANCE_LINES, E2E_SCRIPT, METRIC_LOG, MINI_GOAD, NEVER_SCRIPT, SSH_PASSWORD, SSH_USER, ROOT, scripted_run


@contextlib.contextmanager
def criterion(number, title):
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number}: FAIL {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {number}: PASS {title}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _cli_run(log_dir):
    return subprocess.run(
        [sys.executable, "-m", "cochise.cli", "run", "--scripted-llm", str(E2E_SCRIPT),
         "--mock-testbed", str(MINI_GOAD), "--fixed-clock", "--log-dir", str(log_dir)],
        capture_output=True, text=True, cwd=ROOT,
    )


def test_c01_deterministic_end_to_end(tmp_path):
    with criterion(1, "deterministic end-to-end run"):
        logs = []
        for name in ("a", "b"):
            started = time.monotonic()
            proc = _cli_run(tmp_path / name)
            elapsed = time.monotonic() - started
            assert proc.returncode == 0, proc.stderr
            assert elapsed < 5.0, f"run took {elapsed:.2f} s"
            (log,) = sorted((tmp_path / name).glob("*.jsonl"))
            logs.append(log)
        assert logs[0].name == logs[1].name
        assert logs[0].read_bytes() == logs[1].read_bytes()
        events = read_run(logs[0]).events
        assert events[-1].event == "run.end"
        assert events[-1].payload["reason"] == "mission-complete"
        identities = {e.payload["identity"] for e in events if e.event == "knowledge.account"}
        assert len(identities) == 3


def test_c02_log_schema(e2e_log):
    with criterion(2, "log schema validation"):
        record = read_run(e2e_log)
        assert record.warnings == []
        events = record.events
        assert [e.seq for e in events] == list(range(1, len(events) + 1))
        open_tasks = []
        for e in events:
            if e.event == "task.start":
                assert not open_tasks, "nested task.start"
                open_tasks.append(e.payload["task_id"])
            elif e.event == "task.end":
                assert open_tasks == [e.payload["task_id"]]
                open_tasks.clear()
        assert not open_tasks
        starts = sum(e.event == "task.start" for e in events)
        assert starts == sum(e.event == "task.end" for e in events) > 0
        # run.end carries totals of everything logged before it
        end = events[-1]
        assert end.event == "run.end"
        expected = summarize_run(events[:-1]).to_dict()
        logged = end.payload["totals"]
        assert logged == expected
        assert Decimal(logged["usd"]) == sum((Decimal(e.payload["cost"]["usd"]) for e in events if "cost" in e.payload),
                                             Decimal(0))


def test_c03_episodic_isolation(e2e_log):
    with criterion(3, "episodic isolation"):
        events = read_run(e2e_log).events
        completions = defaultdict(list)  # task_id -> executor completions
        order = []
        for e in events:
            if e.event == "task.start":
                order.append(e.payload["task_id"])
            elif e.event in ("executor.step", "executor.summarize", "reflexion.repair") and e.payload.get("task_id"):
                completions[e.payload["task_id"]].append(e.payload["completion"])
        assert len(order) >= 2
        checked = 0
        for e in events:
            if e.event != "executor.step":
                continue
            task = e.payload["task_id"]
            prompt_text = "\n".join(m["content"] for m in e.payload["prompt"])
            for other in order[: order.index(task)]:
                for completion in completions[other]:
                    assert completion.strip() not in prompt_text, f"task {task} prompt leaks task {other}"
                    checked += 1
        assert checked > 0


def test_c04_round_bounds(tmp_path):
    with criterion(4, "executor and planner round bounds"):
        outcome = scripted_run(tmp_path, script=NEVER_SCRIPT, executor_max_rounds=3, max_planner_rounds=2)
        assert outcome.reason == "planner-rounds-exhausted"
        events = read_run(outcome.log_path).events
        per_task = defaultdict(lambda: defaultdict(int))
        tasks = []
        current = None
        for e in events:
            if e.event == "task.start":
                current = object()
                tasks.append(current)
            elif e.event == "task.end":
                assert e.payload["status"] == "rounds-exhausted"
                current = None
            elif current is not None and e.event in ("executor.step", "executor.summarize"):
                per_task[current][e.event] += 1
        assert len(tasks) == 2
        for t in tasks:
            assert per_task[t]["executor.step"] == 3
            assert per_task[t]["executor.summarize"] == 1
        strategy_rounds = [e for e in events if e.event == "planner.update_strategy" and e.payload["round"] >= 1]
        assert len(strategy_rounds) == 2
        assert events[-1].payload["planner_rounds"] == 2


def _oracle_metrics(path):
    """Brute force straight from the JSON text, exact rationals throughout."""
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

    def seconds(ts):
        hh, mm, ss = ts[11:23].split(":")
        return Fraction(int(hh) * 3600 + int(mm) * 60) + Fraction(ss)

    hours = (seconds(lines[-1]["timestamp"]) - seconds(lines[0]["timestamp"])) / 3600
    usd = sum(Fraction(line["payload"]["cost"]["usd"]) for line in lines if "cost" in line["payload"])
    accounts = len({(line["payload"]["domain"].lower(), line["payload"]["username"].lower())
                    for line in lines if line["event"] == "knowledge.account"})
    return accounts / hours, usd / hours, usd / accounts


def _rel_close(a, b, tol=1e-9):
    return abs(Fraction(a) - Fraction(b)) <= tol * abs(Fraction(b))


def test_c05_metric_oracle():
    with criterion(5, "run metric oracle"):
        metrics = compute_run_metrics(read_run(METRIC_LOG).events)
        acc_h, usd_h, usd_acc = _oracle_metrics(METRIC_LOG)
        assert (acc_h, usd_h, usd_acc) == (6, 3, Fraction(1, 2))
        assert _rel_close(metrics.accounts_per_hour, acc_h)
        assert _rel_close(metrics.usd_per_hour, usd_h)
        assert _rel_close(metrics.usd_per_account, usd_acc)
        assert metrics.distinct_accounts == 3


def _metrics(model, acc_h):
    return RunMetrics("r", model, Decimal(1), int(acc_h), Decimal(1), Decimal(acc_h), Decimal(1), None)


def test_c06_aggregation_oracle():
    with criterion(6, "aggregation oracle"):
        values = [5, 10, 15, 20, 25]
        (agg,) = aggregate_by_model([_metrics("m", v) for v in values])
        assert agg.n_runs == 5
        assert abs(agg.accounts_per_hour.mean - statistics.mean(values)) < 1e-12
        assert abs(agg.accounts_per_hour.mean - 15.00) < 1e-12
        assert abs(agg.accounts_per_hour.std - statistics.stdev(values)) < 1e-12
        assert abs(agg.accounts_per_hour.std - 7.9057) < 1e-4


PUBLISHED = [
    ("Gemini-3-Flash", (15.77, 8.17), (1.75, 1.03), (0.11, 0.03)),
    ("Claude-4.7-Opus", (37.75, 20.13), (21.35, 5.93), (0.74, 0.25)),
]


def test_c07_table_rendering():
    with criterion(7, "published table rendering"):
        aggregates = [ModelAggregate(name, 5, MeanStd(*a, 5), MeanStd(*c, 5), MeanStd(*p, 5))
                      for name, a, c, p in PUBLISHED]
        latex = export_table(aggregates, "latex")
        for cell in ("15.77 +/- 8.17", "1.75 +/- 1.03", "0.11 +/- 0.03",
                     "37.75 +/- 20.13", "21.35 +/- 5.93", "0.74 +/- 0.25"):
            assert cell in latex
        assert "Gemini-3-Flash  & 15.77 +/- 8.17 & 1.75 +/- 1.03 & 0.11 +/- 0.03" in latex
        assert "Claude-4.7-Opus & 37.75 +/- 20.13 & 21.35 +/- 5.93 & 0.74 +/- 0.25" in latex
        for rule in ("\\toprule", "\\midrule", "\\bottomrule", "\\begin{tabular}", "\\end{tabular}"):
            assert rule in latex


WORKED_PRICE = ModelPrice(Decimal(2), Decimal(10), Decimal(10), Decimal("0.5"))

_prices = st.builds(
    ModelPrice,
    *[st.decimals(min_value=0, max_value=100, places=4, allow_nan=False, allow_infinity=False) for _ in range(4)],
)
_tokens = st.integers(min_value=0, max_value=2_000_000)


@st.composite
def _usage(draw):
    input_tokens = draw(_tokens)
    return CostMetrics(input_tokens, draw(_tokens), draw(_tokens), draw(st.integers(0, input_tokens)))


def _scaled(usage, k):
    return CostMetrics(usage.input_tokens * k, usage.output_tokens * k, usage.reasoning_tokens * k,
                       usage.cached_tokens * k)


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(price=_prices, usage=_usage(), k=st.integers(min_value=0, max_value=1000))
def _linearity(price, usage, k):
    table = PriceTable({"m": price})
    base = compute_cost(usage, "m", table)
    assert compute_cost(_scaled(usage, k), "m", table) == base * k


def test_c08_cost_accounting():
    with criterion(8, "cost accounting"):
        usage = CostMetrics(input_tokens=1000, output_tokens=500, reasoning_tokens=200, cached_tokens=400)
        cost = compute_cost(usage, "m", PriceTable({"m": WORKED_PRICE}))
        assert cost == Decimal("0.008400")
        assert isinstance(cost, Decimal)
        _linearity()


def test_c09_replay_round_trip(e2e_log):
    with criterion(9, "replay round trip"):
        before = hashlib.sha256(e2e_log.read_bytes()).hexdigest()
        proc = subprocess.run([sys.executable, "-m", "cochise.replay", "--speed", "0", str(e2e_log)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        total = len(read_run(e2e_log).events)
        blocks = sum(line.startswith("── #") for line in proc.stdout.splitlines())
        assert blocks == total
        summary = replay(e2e_log, ReplayOptions(event_filter=frozenset({"cmd.execute"})), out=_Sink())
        assert summary.shown + summary.filtered == summary.total == total
        assert summary.shown == sum(e.event == "cmd.execute" for e in read_run(e2e_log).events) > 0
        assert hashlib.sha256(e2e_log.read_bytes()).hexdigest() == before


class _Sink:
    def write(self, text):
        pass


@pytest.mark.ssh
def test_c10_ssh_smoke(ssh_server, tmp_path):
    with criterion(10, "ssh smoke test"):
        descriptor = ChannelDescriptor(kind="ssh", host="127.0.0.1", port=ssh_server.port, username=SSH_USER,
                                       password=SSH_PASSWORD, command_timeout=1.0)
        with SSHChannel(descriptor, known_hosts=tmp_path / "known_hosts") as channel:
            result = channel.run_command("echo hello")
            assert result.stdout == "hello\n"
            assert result.exit_code == 0
            started = time.monotonic()
            result = channel.run_command("sleep 10")
            elapsed = time.monotonic() - started
            assert result.timed_out is True
            assert result.exit_code is None
            assert elapsed < 1.5, f"timeout took {elapsed:.2f} s"


def test_c11_graph_emission(e2e_log, tmp_path):
    with criterion(11, "graph emission"):
        out = emit_graph_series([e2e_log], "cumulative-cost", tmp_path)
        rows = out.csvs[0].read_text().splitlines()
        assert rows[0] == "elapsed_seconds,value"
        values = [Decimal(r.split(",")[1]) for r in rows[1:]]
        times = [float(r.split(",")[0]) for r in rows[1:]]
        assert values and all(a <= b for a, b in zip(values, values[1:]))
        assert all(a <= b for a, b in zip(times, times[1:]))
        total = Decimal(read_run(e2e_log).events[-1].payload["totals"]["usd"])
        assert values[-1] == total
        root = ET.parse(out.svg).getroot()
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 1


_marker_lines = st.one_of(
    st.builds(lambda t: f"FINDING: {t}", st.text(alphabet="abcdefgh .:-", min_size=1, max_size=30)),
    st.builds(lambda d, u, s, k: f"ACCOUNT: {d}\\{u}:{s} [{k}]",
              st.sampled_from(["north", "NORTH", "essos", "sevenkingdoms"]),
              st.sampled_from(["jon.snow", "Jon.Snow", "arya", "sansa.stark"]),
              st.text(alphabet="abcXYZ0129!@", min_size=1, max_size=12),
              st.sampled_from(["password", "ntlm_hash", "ticket", "other"])),
    st.just("ACCOUNT: broken-marker"),
    st.just("plain prose line"),
)


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(completions=st.lists(st.lists(_marker_lines, max_size=6).map("\n".join), max_size=12),
       budget=st.integers(min_value=1024, max_value=4096))
def _fold_property(tmp_path_factory, completions, budget):
    directory = tmp_path_factory.mktemp("fold")
    log = open_run(directory, {}, SteppingClock(), run_ids=deterministic_run_ids("fold"))
    store = KnowledgeStore(log)
    for i, completion in enumerate(completions):
        store.apply_markers(completion, "executor", str(i))
    in_run = store.render_worldview(budget)
    log.close()
    knowledge = [e for e in read_run(log.path).events if e.event.startswith("knowledge.")]
    assert KnowledgeStore.from_events(knowledge).render_worldview(budget) == in_run


def test_c12_knowledge_fold(e2e_log, tmp_path_factory):
    with criterion(12, "knowledge fold reconstructs world-view"):
        _fold_property(tmp_path_factory)
        events = read_run(e2e_log).events
        last_round = [e for e in events if e.event == "planner.update_strategy"][-1]
        rendered = last_round.payload["prompt"][1]["content"].split("Current world-view:\n", 1)[1]
        rendered = rendered.split("\n\nRevise the tree", 1)[0]
        knowledge = [e for e in events if e.event.startswith("knowledge.") and e.seq < last_round.seq]
        assert KnowledgeStore.from_events(knowledge).render_worldview(8000).rstrip("\n") == rendered
