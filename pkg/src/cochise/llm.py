"""Provider-agnostic chat completion gateway with exact USD accounting.

Backends return raw completions plus reported token usage; the ``Gateway``
prices the usage against a ``PriceTable`` and retries transient failures.
Logging is the caller's job.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from cochise.log import LLM_EVENT_KEYS, CostMetrics, TrajectoryEvent

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
MILLION = Decimal(1_000_000)


class GatewayError(Exception):
    pass


class AuthError(GatewayError):
    """Credentials rejected; never retried."""


class TransientError(GatewayError):
    """Rate limit, 5xx or transport failure; retried with backoff."""


class RetriesExhausted(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    pass


class ReplayDivergence(GatewayError):
    pass


class UnknownModelError(GatewayError):
    pass


# ---------------------------------------------------------------------------
# pricing


@dataclass(frozen=True)
class ModelPrice:
    """USD per million tokens, per category."""

    input: Decimal
    output: Decimal
    reasoning: Decimal
    cached: Decimal

    def __post_init__(self):
        for name in ("input", "output", "reasoning", "cached"):
            value = Decimal(str(getattr(self, name)))
            if value < 0:
                raise ValueError(f"negative {name} price: {value}")
            object.__setattr__(self, name, value)

    def to_dict(self) -> dict[str, str]:
        return {
            "usd_per_million_input": str(self.input),
            "usd_per_million_output": str(self.output),
            "usd_per_million_reasoning": str(self.reasoning),
            "usd_per_million_cached": str(self.cached),
        }


class PriceTable:
    def __init__(self, prices: Mapping[str, ModelPrice] | None = None):
        self._prices: dict[str, ModelPrice] = dict(prices or {})

    @classmethod
    def from_mapping(cls, data: Mapping[str, Mapping[str, Any]]) -> "PriceTable":
        prices = {}
        for model, entry in data.items():
            output = entry["usd_per_million_output"]
            prices[model] = ModelPrice(
                input=entry["usd_per_million_input"],
                output=output,
                # unreported reasoning rate falls back to the output rate
                reasoning=entry.get("usd_per_million_reasoning", output),
                cached=entry.get("usd_per_million_cached", entry["usd_per_million_input"]),
            )
        return cls(prices)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PriceTable":
        """Read a TOML (``[models."id"]`` tables) or JSON price file."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            from cochise.config import toml_loads

            data = toml_loads(text)
        return cls.from_mapping(data.get("models", data))

    def update(self, other: "PriceTable") -> None:
        self._prices.update(other._prices)

    def __contains__(self, model: str) -> bool:
        return model in self._prices

    def __len__(self) -> int:
        return len(self._prices)

    def lookup(self, model: str) -> ModelPrice:
        if model in self._prices:
            return self._prices[model]
        raise UnknownModelError(f"no price table entry for model {model!r}")

    def to_dict(self) -> dict[str, dict[str, str]]:
        return {model: price.to_dict() for model, price in sorted(self._prices.items())}


def compute_cost(usage: CostMetrics | Mapping[str, int], model: str, prices: PriceTable) -> Decimal:
    """Exact USD cost of one call.

    Cached tokens are a subset of the input tokens and are billed at the
    cached rate instead of the input rate.
    """
    if isinstance(usage, Mapping):
        usage = CostMetrics(**{k: int(v) for k, v in usage.items() if k != "usd"})
    if usage.cached_tokens > usage.input_tokens:
        raise ValueError(
            f"cached_tokens ({usage.cached_tokens}) exceeds input_tokens ({usage.input_tokens})"
        )
    price = prices.lookup(model)
    with localcontext() as ctx:
        ctx.prec = 60
        total = (
            (usage.input_tokens - usage.cached_tokens) * price.input
            + usage.cached_tokens * price.cached
            + usage.output_tokens * price.output
            + usage.reasoning_tokens * price.reasoning
        ) / MILLION
    return total


# ---------------------------------------------------------------------------
# requests and responses


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: Sequence[Mapping[str, str]]
    max_output_tokens: int | None = None
    temperature: float | None = None
    # architectural action (the log event key); used by replay matching only
    action: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for msg in self.messages:
            if msg.get("role") not in ROLES:
                raise ValueError(f"bad message role: {msg.get('role')!r}")


@dataclass(frozen=True)
class BackendReply:
    completion: str
    usage: CostMetrics = field(default_factory=CostMetrics)
    latency_ms: int = 0


@dataclass(frozen=True)
class ChatResponse:
    completion: str
    cost: CostMetrics
    provider_latency_ms: int = 0


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> BackendReply: ...


def _usage_from(data: Mapping[str, Any] | None) -> CostMetrics:
    data = data or {}
    return CostMetrics(
        input_tokens=int(data.get("input_tokens", 0)),
        output_tokens=int(data.get("output_tokens", 0)),
        reasoning_tokens=int(data.get("reasoning_tokens", 0)),
        cached_tokens=int(data.get("cached_tokens", 0)),
    )


class ScriptedBackend:
    """Answers calls from a fixed list of completions, in order.

    Entries are plain strings or ``{"completion", "usage", "action"}``
    objects; when ``action`` is given the caller's action must match.
    """

    def __init__(self, entries: Iterable[str | Mapping[str, Any]]):
        self._entries = deque(entries)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedBackend":
        return cls(load_script(path)["responses"])

    def complete(self, request: ChatRequest) -> BackendReply:
        if not self._entries:
            raise ScriptExhausted(f"script exhausted after {self.calls} call(s)")
        entry = self._entries.popleft()
        self.calls += 1
        if isinstance(entry, str):
            return BackendReply(entry)
        expected = entry.get("action")
        if expected and request.action and expected != request.action:
            raise ReplayDivergence(
                f"script entry {self.calls} is for {expected!r} but caller is {request.action!r}"
            )
        return BackendReply(entry["completion"], _usage_from(entry.get("usage")))


def load_script(path: str | os.PathLike) -> dict[str, Any]:
    """Load a scripted-LLM file: a JSON list, or an object with ``responses``
    and optional ``model`` and ``prices`` keys."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        data = {"responses": data}
    data.setdefault("prices", {})
    return data


class ReplayBackend:
    """Re-serves the LLM completions recorded in a trajectory log."""

    def __init__(self, events: Iterable[TrajectoryEvent]):
        self._queue = deque(e for e in events if e.event in LLM_EVENT_KEYS)

    def complete(self, request: ChatRequest) -> BackendReply:
        if not self._queue:
            raise ReplayDivergence(f"log exhausted (caller: {request.action or '?'})")
        event = self._queue[0]
        if request.action and event.event != request.action:
            raise ReplayDivergence(
                f"replay diverged at seq {event.seq}: expected {event.event!r}, got {request.action!r}"
            )
        self._queue.popleft()
        cost = event.payload.get("cost") or {}
        return BackendReply(event.payload["completion"], _usage_from(cost), int(event.payload.get("duration_ms", 0)))


def replay_backend_from_log(events: Iterable[TrajectoryEvent]) -> ReplayBackend:
    return ReplayBackend(events)


class OpenAICompatibleBackend:
    """HTTP backend speaking the OpenAI chat-completions JSON shape.

    Model ids may carry a ``provider/`` prefix; the prefix picks the base URL
    and API key and is stripped before sending.
    """

    def __init__(
        self,
        base_urls: Mapping[str, str] | None = None,
        *,
        default_base_url: str = "https://api.openai.com/v1",
        api_keys: Mapping[str, str] | None = None,
        timeout: float = 600.0,
        client: httpx.Client | None = None,
    ):
        self.base_urls = dict(base_urls or {})
        self.default_base_url = default_base_url
        self.api_keys = dict(api_keys) if api_keys is not None else api_keys_from_env()
        self.client = client or httpx.Client(timeout=timeout)

    def _route(self, model: str) -> tuple[str, str, str | None]:
        provider, sep, name = model.partition("/")
        if sep and provider in self.base_urls:
            return self.base_urls[provider], name, self.api_keys.get(provider.upper(), self.api_keys.get(""))
        if sep and provider == "openai":
            return self.default_base_url, name, self.api_keys.get("OPENAI", self.api_keys.get(""))
        return self.default_base_url, model, self.api_keys.get("")

    def complete(self, request: ChatRequest) -> BackendReply:
        base_url, model, key = self._route(request.model)
        body: dict[str, Any] = {"model": model, "messages": [dict(m) for m in request.messages]}
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        if request.temperature is not None:
            body["temperature"] = request.temperature
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        started = time.monotonic()
        try:
            resp = self.client.post(base_url.rstrip("/") + "/chat/completions", json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        latency = int((time.monotonic() - started) * 1000)
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication failed ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"provider returned {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"provider returned {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        completion = data["choices"][0]["message"].get("content") or ""
        return BackendReply(completion, usage_from_openai(data.get("usage")), latency)


def usage_from_openai(usage: Mapping[str, Any] | None) -> CostMetrics:
    """Map an OpenAI-shaped ``usage`` object onto disjoint token categories.

    Missing categories are recorded as 0.  Reasoning tokens are reported
    inside ``completion_tokens`` by such providers and are split out here.
    """
    usage = usage or {}
    prompt = int(usage.get("prompt_tokens", usage.get("input_tokens", 0)) or 0)
    completion = int(usage.get("completion_tokens", usage.get("output_tokens", 0)) or 0)
    reasoning = int((usage.get("completion_tokens_details") or {}).get("reasoning_tokens", 0) or 0)
    cached = int((usage.get("prompt_tokens_details") or {}).get("cached_tokens", 0) or 0)
    return CostMetrics(
        input_tokens=prompt,
        output_tokens=max(0, completion - reasoning),
        reasoning_tokens=reasoning,
        cached_tokens=min(cached, prompt),
    )


def api_keys_from_env(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """``COCHISE_API_KEY`` maps to ``""``; ``COCHISE_API_KEY_<P>`` to ``P``."""
    environ = os.environ if environ is None else environ
    keys = {}
    for name, value in environ.items():
        if name == "COCHISE_API_KEY":
            keys[""] = value
        elif name.startswith("COCHISE_API_KEY_"):
            keys[name[len("COCHISE_API_KEY_"):].upper()] = value
    return keys


# ---------------------------------------------------------------------------
# gateway


class Gateway:
    def __init__(
        self,
        backend: Backend,
        prices: PriceTable,
        *,
        backoff: Sequence[float] = (1.0, 4.0, 16.0),
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.prices = prices
        self.backoff = tuple(backoff)
        self.sleep = sleep

    def complete(self, request: ChatRequest) -> ChatResponse:
        # fail before spending tokens on an unpriced model
        self.prices.lookup(request.model)
        attempt = 0
        while True:
            try:
                reply = self.backend.complete(request)
                break
            except TransientError as exc:
                if attempt >= len(self.backoff):
                    raise RetriesExhausted(f"{exc} (gave up after {attempt} retries)") from exc
                delay = self.backoff[attempt]
                attempt += 1
                logger.warning("transient LLM failure (%s); retry %d in %.0fs", exc, attempt, delay)
                self.sleep(delay)
        usage = reply.usage
        usd = compute_cost(usage, request.model, self.prices)
        cost = CostMetrics(
            usage.input_tokens, usage.output_tokens, usage.reasoning_tokens, usage.cached_tokens, usd
        )
        return ChatResponse(reply.completion, cost, reply.latency_ms)
