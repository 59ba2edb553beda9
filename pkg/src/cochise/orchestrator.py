"""The run loop: bootstrap the task tree, then alternate planner rounds and
executor episodes until the mission completes or a limit trips."""

from __future__ import annotations

import logging
import signal
import threading
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterator

from cochise.agent import LimitStop, LlmCaller
from cochise.channel import Channel, ChannelError, connect
from cochise.config import Limits, RunConfig
from cochise.executor import Executor
from cochise.knowledge import KnowledgeStore
from cochise.llm import (
    Backend,
    Gateway,
    GatewayError,
    OpenAICompatibleBackend,
    PriceTable,
    ScriptedBackend,
    api_keys_from_env,
    load_script,
)
from cochise.log import LogWriteError, RunTotals, SystemClock, open_run
from cochise.planner import ExecutorSummary, Planner, PlannerError

logger = logging.getLogger(__name__)

MISSION_COMPLETE = "mission-complete"
LIMIT_REASONS = ("planner-rounds-exhausted", "wallclock-exceeded", "budget-exceeded")
EXIT_CODES = {MISSION_COMPLETE: 0, "fatal-error": 1}


@dataclass
class RunOutcome:
    reason: str
    totals: RunTotals
    run_id: str | None = None
    log_path: Path | None = None
    error: str | None = None

    @property
    def exit_code(self) -> int:
        """0 mission complete, 1 fatal, 2 limit stop or interrupt."""
        return EXIT_CODES.get(self.reason, 2)


@dataclass(frozen=True)
class LimitState:
    usd_spent: Decimal
    elapsed_minutes: float
    planner_rounds: int
    interrupted: bool = False


def check_limits(state: LimitState, limits: Limits, *, include_rounds: bool = True) -> str | None:
    """Return the stop reason, or None to continue.

    Precedence when several trip together: budget > wallclock > rounds.
    The budget trips inclusively (spent == budget stops).
    """
    if state.interrupted:
        return "interrupted"
    if limits.max_usd_budget is not None and state.usd_spent >= limits.max_usd_budget:
        return "budget-exceeded"
    if state.elapsed_minutes >= limits.max_wallclock_minutes:
        return "wallclock-exceeded"
    if include_rounds and state.planner_rounds >= limits.max_planner_rounds:
        return "planner-rounds-exhausted"
    return None


class _Interrupt:
    """First SIGINT requests a clean stop between steps; a second one kills."""

    def __init__(self):
        self.requested = False
        self._previous = None

    def __enter__(self):
        if threading.current_thread() is threading.main_thread():
            self._previous = signal.signal(signal.SIGINT, self._handle)
        return self

    def _handle(self, signum, frame):
        self.requested = True
        logger.warning("interrupt received; stopping after the current step")
        signal.signal(signal.SIGINT, self._previous or signal.default_int_handler)

    def __exit__(self, *exc):
        if self._previous is not None:
            signal.signal(signal.SIGINT, self._previous)


def build_prices(config: RunConfig, script: dict | None = None) -> PriceTable:
    prices = PriceTable()
    if config.price_table_path:
        prices.update(PriceTable.load(config.price_table_path))
    if config.prices:
        prices.update(PriceTable.from_mapping(config.prices))
    if script and script.get("prices"):
        prices.update(PriceTable.from_mapping(script["prices"]))
    return prices


def resolve_scenario(config: RunConfig) -> str:
    if config.scenario_text is None and not config.scenario_path and config.channel.kind == "mock":
        from cochise.testbed import load_fixture

        fixture_scenario = load_fixture(config.channel.fixture).scenario
        if fixture_scenario.strip():
            return fixture_scenario
    return config.scenario()


def run(
    config: RunConfig,
    *,
    backend: Backend | None = None,
    clock=None,
    run_ids: Iterator[str] | None = None,
    channel: Channel | None = None,
    handle_signals: bool = True,
) -> RunOutcome:
    """Execute one run and return its outcome (mirrors the ``run.end`` event)."""
    clock = clock or SystemClock()
    script = load_script(config.scripted_llm) if config.scripted_llm else None
    if backend is None:
        if script is not None:
            backend = ScriptedBackend(script["responses"])
        else:
            backend = OpenAICompatibleBackend(config.providers)
    prices = build_prices(config, script)
    scenario = resolve_scenario(config)
    secrets = list(config.channel.secrets) + list(api_keys_from_env().values())

    config.channel.validate()

    log_dir = Path(config.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    log = open_run(log_dir, config.snapshot(scenario, prices.to_dict()), clock, run_ids=run_ids, secrets=secrets)
    started = clock.now()
    limits = config.limits
    knowledge = KnowledgeStore(log)
    caller = LlmCaller(Gateway(backend, prices), log)
    planner = Planner(scenario, caller, knowledge, config.planner_model)
    reason, error = None, None

    with _Interrupt() if handle_signals else _NoInterrupt() as interrupt:

        def state() -> LimitState:
            elapsed = (clock.now() - started).total_seconds() / 60
            return LimitState(log.totals.usd, elapsed, planner.rounds, interrupt.requested)

        def executor_check() -> None:
            stop = check_limits(state(), limits, include_rounds=False)
            if stop:
                raise LimitStop(stop)

        executor = Executor(
            caller, knowledge, config.effective_executor_model,
            max_rounds=limits.executor_max_rounds, check_limits=executor_check,
        )
        try:
            if channel is None:
                channel = connect(config.channel, known_hosts=log_dir / "known_hosts")
            ptt = planner.initial_ptt()
            last: ExecutorSummary | None = None
            while True:
                reason = check_limits(state(), limits)
                if reason:
                    break
                decision = planner.strategy_round(ptt, last)
                ptt = decision.ptt
                if decision.complete:
                    reason = MISSION_COMPLETE
                    break
                last = executor.run_episode(decision.assignment, channel)
        except LimitStop as stop:
            reason = stop.reason
        except KeyboardInterrupt:
            reason = "interrupted"
        except LogWriteError as exc:
            reason, error = "fatal-error", f"log-failure: {exc}"
            logger.error("run failed: %s", error)
        except (GatewayError, PlannerError, ChannelError, OSError) as exc:
            reason, error = "fatal-error", f"{type(exc).__name__}: {exc}"
            logger.error("run failed: %s", error)
        finally:
            if channel is not None:
                channel.close()

    outcome = RunOutcome(reason, _copy_totals(log.totals), log.run_id, log.path, error)
    payload = {"reason": reason, "planner_rounds": planner.rounds, "totals": log.totals.to_dict()}
    if error:
        payload["error"] = error
    try:
        log.append("run.end", payload)
    except LogWriteError as exc:
        logger.error("could not write run.end: %s", exc)
    finally:
        log.close()
    return outcome


class _NoInterrupt:
    requested = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def _copy_totals(totals: RunTotals) -> RunTotals:
    return RunTotals(
        totals.total_events, dict(totals.event_counts), totals.input_tokens, totals.output_tokens,
        totals.reasoning_tokens, totals.cached_tokens, totals.usd, totals.duration_ms, totals.distinct_accounts,
    )
