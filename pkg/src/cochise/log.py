"""Per-run JSON Lines trajectory log: writer, reader and run totals.

Every line of a ``<run_id>.jsonl`` file is one event object with the fields
``run_id``, ``seq``, ``timestamp``, ``event`` and ``payload``.  The format is
documented in ``docs/log-format.md``.
"""

from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

EVENT_KEYS = frozenset(
    {
        "run.start",
        "run.end",
        "planner.update_strategy",
        "planner.select_task",
        "executor.step",
        "executor.summarize",
        "reflexion.repair",
        "cmd.execute",
        "knowledge.finding",
        "knowledge.account",
        "ptt.update",
        "task.start",
        "task.end",
    }
)

# events whose payload is an LLM call record carrying a ``cost`` object
LLM_EVENT_KEYS = frozenset(
    {"planner.update_strategy", "executor.step", "executor.summarize", "reflexion.repair"}
)

REDACTED = "<redacted>"
SECRET_KEYS = frozenset({"api_key", "password", "passphrase", "token", "secret_key", "private_key"})

STREAM_CAP = 1024 * 1024
STREAM_HALF = STREAM_CAP // 2

USD_PLACES = 9


class LogError(Exception):
    """Base class for trajectory log errors."""


class LogParseError(LogError):
    def __init__(self, path: Path | str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class LogValidationError(LogError):
    pass


class RunIdCollision(LogError):
    pass


class LogWriteError(LogError):
    """The log file could not be written; the run must stop."""


# ---------------------------------------------------------------------------
# clocks


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class SteppingClock:
    """Deterministic clock: every ``now()`` call advances by ``step``.

    Used for byte-stable logs in tests and ``--fixed-clock`` runs.
    """

    def __init__(self, start: datetime | str = "2025-01-01T00:00:00Z", step: timedelta = timedelta(seconds=1)):
        if isinstance(start, str):
            start = parse_timestamp(start)
        self._next = start
        self.step = step

    def now(self) -> datetime:
        current = self._next
        self._next = current + self.step
        return current


def format_timestamp(moment: datetime) -> str:
    moment = moment.astimezone(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%S.") + f"{moment.microsecond // 1000:03d}Z"


def parse_timestamp(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    moment = datetime.fromisoformat(text)
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment


def elapsed_ms(start: datetime, end: datetime) -> int:
    return max(0, round((end - start) / timedelta(milliseconds=1)))


# ---------------------------------------------------------------------------
# cost records


def format_usd(amount: Decimal) -> str:
    """Render USD with at least nine fractional digits and never round."""
    amount = Decimal(amount)
    exponent = amount.as_tuple().exponent
    places = max(USD_PLACES, -exponent if isinstance(exponent, int) else USD_PLACES)
    return f"{amount:.{places}f}"


@dataclass(frozen=True)
class CostMetrics:
    input_tokens: int = 0
    output_tokens: int = 0
    reasoning_tokens: int = 0
    cached_tokens: int = 0
    usd: Decimal = Decimal(0)

    def __post_init__(self):
        for name in ("input_tokens", "output_tokens", "reasoning_tokens", "cached_tokens"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
        object.__setattr__(self, "usd", Decimal(self.usd))
        if self.usd < 0:
            raise ValueError(f"usd must be non-negative, got {self.usd}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "reasoning_tokens": self.reasoning_tokens,
            "cached_tokens": self.cached_tokens,
            "usd": format_usd(self.usd),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostMetrics":
        return cls(
            input_tokens=int(data.get("input_tokens", 0)),
            output_tokens=int(data.get("output_tokens", 0)),
            reasoning_tokens=int(data.get("reasoning_tokens", 0)),
            cached_tokens=int(data.get("cached_tokens", 0)),
            usd=Decimal(str(data.get("usd", "0"))),
        )


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class TrajectoryEvent:
    run_id: str
    seq: int
    timestamp: str
    event: str
    payload: dict[str, Any]

    @property
    def time(self) -> datetime:
        return parse_timestamp(self.timestamp)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seq": self.seq,
            "timestamp": self.timestamp,
            "event": self.event,
            "payload": self.payload,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrajectoryEvent":
        missing = [k for k in ("run_id", "seq", "timestamp", "event", "payload") if k not in data]
        if missing:
            raise ValueError(f"missing field(s): {', '.join(missing)}")
        if not isinstance(data["seq"], int) or isinstance(data["seq"], bool):
            raise ValueError(f"seq must be an integer, got {data['seq']!r}")
        if not isinstance(data["payload"], dict):
            raise ValueError("payload must be an object")
        return cls(str(data["run_id"]), data["seq"], str(data["timestamp"]), str(data["event"]), data["payload"])


def cost_of(event: TrajectoryEvent) -> CostMetrics | None:
    if event.event in LLM_EVENT_KEYS and isinstance(event.payload.get("cost"), dict):
        return CostMetrics.from_dict(event.payload["cost"])
    return None


def account_identity(domain: str, username: str) -> str:
    return f"{domain.lower()}\\{username.lower()}"


# ---------------------------------------------------------------------------
# redaction and stream capture


def redact_config(value: Any) -> Any:
    """Replace values stored under secret-looking keys with ``<redacted>``."""
    if isinstance(value, Mapping):
        out = {}
        for key, item in value.items():
            lowered = str(key).lower()
            if item not in (None, "") and (lowered in SECRET_KEYS or lowered.endswith("_api_key")):
                out[key] = REDACTED
            else:
                out[key] = redact_config(item)
        return out
    if isinstance(value, (list, tuple)):
        return [redact_config(item) for item in value]
    return value


def _scrub(value: Any, secrets: tuple[str, ...]) -> Any:
    if isinstance(value, str):
        for secret in secrets:
            if secret in value:
                value = value.replace(secret, REDACTED)
        return value
    if isinstance(value, dict):
        return {k: _scrub(v, secrets) for k, v in value.items()}
    if isinstance(value, list):
        return [_scrub(v, secrets) for v in value]
    return value


def cap_stream(text: str) -> tuple[str, bool]:
    """Bound a captured stream to 1 MiB of UTF-8: keep head and tail halves."""
    raw = text.encode("utf-8", errors="replace")
    if len(raw) <= STREAM_CAP:
        return text, False
    head = raw[:STREAM_HALF].decode("utf-8", errors="ignore")
    tail = raw[-STREAM_HALF:].decode("utf-8", errors="ignore")
    dropped = len(raw) - 2 * STREAM_HALF
    return f"{head}\n[... {dropped} bytes truncated ...]\n{tail}", True


def command_payload(cmd: str, result: Any, task_id: str | None = None) -> dict[str, Any]:
    """Build a ``cmd.execute`` payload from a channel ``CommandResult``."""
    stdout, stdout_cut = cap_stream(result.stdout)
    stderr, stderr_cut = cap_stream(result.stderr)
    payload: dict[str, Any] = {
        "cmd": cmd,
        "stdout": stdout,
        "stderr": stderr,
        "exit_code": result.exit_code,
        "duration_ms": int(result.duration_ms),
        "stdout_truncated": stdout_cut,
        "stderr_truncated": stderr_cut,
        "timed_out": bool(result.timed_out),
    }
    if result.exit_code is None:
        del payload["exit_code"]
    if getattr(result, "error", None):
        payload["channel_error"] = result.error
    if task_id is not None:
        payload["task_id"] = task_id
    return payload


# ---------------------------------------------------------------------------
# totals


@dataclass
class RunTotals:
    total_events: int = 0
    event_counts: dict[str, int] = field(default_factory=dict)
    input_tokens: int = 0
    output_tokens: int = 0
    reasoning_tokens: int = 0
    cached_tokens: int = 0
    usd: Decimal = Decimal(0)
    duration_ms: int = 0
    distinct_accounts: int = 0
    _first: datetime | None = field(default=None, repr=False, compare=False)
    _identities: set = field(default_factory=set, repr=False, compare=False)

    def add(self, event: TrajectoryEvent) -> None:
        self.total_events += 1
        self.event_counts[event.event] = self.event_counts.get(event.event, 0) + 1
        cost = cost_of(event)
        if cost is not None:
            self.input_tokens += cost.input_tokens
            self.output_tokens += cost.output_tokens
            self.reasoning_tokens += cost.reasoning_tokens
            self.cached_tokens += cost.cached_tokens
            self.usd += cost.usd
        if event.event == "knowledge.account":
            p = event.payload
            self._identities.add(p.get("identity") or account_identity(p.get("domain", ""), p["username"]))
            self.distinct_accounts = len(self._identities)
        moment = event.time
        if self._first is None:
            self._first = moment
        self.duration_ms = elapsed_ms(self._first, moment)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_events": self.total_events,
            "event_counts": dict(sorted(self.event_counts.items())),
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "reasoning_tokens": self.reasoning_tokens,
            "cached_tokens": self.cached_tokens,
            "usd": format_usd(self.usd),
            "duration_ms": self.duration_ms,
            "distinct_accounts": self.distinct_accounts,
        }


def summarize_run(events: Iterable[TrajectoryEvent]) -> RunTotals:
    totals = RunTotals()
    for event in events:
        totals.add(event)
    if totals.total_events == 0:
        raise LogValidationError("empty run")
    return totals


# ---------------------------------------------------------------------------
# writer


def _default_run_ids() -> Iterator[str]:
    while True:
        yield str(uuid.uuid4())


def deterministic_run_ids(seed: str) -> Iterator[str]:
    """UUID-format ids derived from ``seed``; used with fixed clocks."""
    n = 0
    while True:
        yield str(uuid.uuid5(uuid.NAMESPACE_URL, f"cochise:{seed}:{n}"))
        n += 1


class RunLog:
    """Append-only writer for one run's ``.jsonl`` file (the run log handle).

    Single writer: appends are serialized by the owner.  Every append is
    flushed and fsynced before returning.
    """

    def __init__(self, path: Path, run_id: str, clock, secrets: Iterable[str] = ()):
        self.path = path
        self.run_id = run_id
        self.clock = clock
        self.next_seq = 1
        self.totals = RunTotals()
        self._secrets = tuple(sorted({s for s in secrets if s}, key=len, reverse=True))
        self._last_time: datetime | None = None
        self._fh = None

    @classmethod
    def open(
        cls,
        directory: str | os.PathLike,
        run_config: Mapping[str, Any],
        clock=None,
        *,
        run_ids: Iterator[str] | None = None,
        secrets: Iterable[str] = (),
        harness_version: str | None = None,
    ) -> "RunLog":
        from cochise import __version__

        directory = Path(directory)
        if not directory.is_dir():
            raise LogError(f"log directory does not exist: {directory}")
        run_ids = run_ids or _default_run_ids()
        clock = clock or SystemClock()
        for _ in range(2):
            run_id = next(run_ids)
            path = directory / f"{run_id}.jsonl"
            try:
                fh = open(path, "x", encoding="utf-8", newline="\n")
            except FileExistsError:
                continue
            log = cls(path, run_id, clock, secrets)
            log._fh = fh
            log.append(
                "run.start",
                {"harness_version": harness_version or __version__, "config": redact_config(dict(run_config))},
            )
            return log
        raise RunIdCollision(f"run id collision in {directory} (after one regeneration)")

    @property
    def closed(self) -> bool:
        return self._fh is None

    def append(self, event_key: str, payload: Mapping[str, Any]) -> int:
        if event_key not in EVENT_KEYS:
            raise ValueError(f"unknown event key: {event_key!r}")
        if self._fh is None:
            raise LogError("run log is closed")
        moment = self.clock.now()
        if self._last_time is not None and moment < self._last_time:
            moment = self._last_time
        self._last_time = moment
        event = TrajectoryEvent(
            run_id=self.run_id,
            seq=self.next_seq,
            timestamp=format_timestamp(moment),
            event=event_key,
            payload=_scrub(json.loads(json.dumps(payload)), self._secrets),
        )
        try:
            self._fh.write(event.to_line())
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise LogWriteError(f"cannot append to {self.path}: {exc}") from exc
        self.totals.add(event)
        self.next_seq += 1
        return event.seq

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_run(directory, run_config, clock=None, **kwargs) -> RunLog:
    return RunLog.open(directory, run_config, clock, **kwargs)


def append_event(handle: RunLog, event_key: str, payload: Mapping[str, Any]) -> int:
    return handle.append(event_key, payload)


# ---------------------------------------------------------------------------
# reader


@dataclass
class RunRecord:
    path: Path
    events: list[TrajectoryEvent]
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)


def _validate(path: Path, events: list[TrajectoryEvent]) -> None:
    for index, event in enumerate(events):
        if event.event not in EVENT_KEYS:
            raise LogValidationError(f"{path}: seq {event.seq}: unknown event key {event.event!r}")
    seqs = [e.seq for e in events]
    expected = range(1, len(seqs) + 1)
    if seqs != list(expected):
        present = set(seqs)
        top = max(seqs) if seqs else 0
        missing = [n for n in range(1, top + 1) if n not in present]
        if missing:
            raise LogValidationError(f"{path}: missing seq {', '.join(map(str, missing))}")
        raise LogValidationError(f"{path}: seq values out of order or duplicated")
    previous = None
    for event in events:
        try:
            moment = event.time
        except ValueError as exc:
            raise LogValidationError(f"{path}: seq {event.seq}: bad timestamp {event.timestamp!r}") from exc
        if previous is not None and moment < previous:
            raise LogValidationError(f"{path}: seq {event.seq}: timestamp goes backwards")
        previous = moment


def read_run(path: str | os.PathLike) -> RunRecord:
    """Parse and validate one run log.

    Accepts JSON Lines or a single top-level JSON array.  A cut-off final
    line is tolerated and reported in ``warnings``.
    """
    path = Path(path)
    raw = path.read_bytes()
    warnings: list[str] = []
    events: list[TrajectoryEvent] = []

    if raw.lstrip()[:1] == b"[":
        try:
            items = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise LogParseError(path, exc.lineno, f"invalid JSON array: {exc.msg}") from exc
        for index, item in enumerate(items, start=1):
            try:
                events.append(TrajectoryEvent.from_dict(item))
            except (ValueError, TypeError) as exc:
                raise LogParseError(path, index, f"array element {index}: {exc}") from exc
    else:
        lines = raw.split(b"\n")
        last_index = max((i for i, line in enumerate(lines) if line.strip()), default=-1)
        for index, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                data = json.loads(line.decode("utf-8"))
                events.append(TrajectoryEvent.from_dict(data))
            except (ValueError, TypeError, UnicodeDecodeError) as exc:
                if index == last_index and not raw.endswith(b"\n"):
                    warnings.append(f"truncated final line {index + 1} ignored ({len(line)} bytes)")
                    break
                raise LogParseError(path, index + 1, str(exc)) from exc

    _validate(path, events)
    return RunRecord(path, events, warnings)


def write_events(path: str | os.PathLike, events: Iterable[TrajectoryEvent]) -> None:
    """Serialize events back to JSON Lines (used for round-trip checks)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for event in events:
            fh.write(event.to_line())
