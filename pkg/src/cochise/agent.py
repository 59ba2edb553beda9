"""Logged LLM calls and Reflexion repair plumbing shared by planner and executor."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

from cochise.channel import CommandResult
from cochise.llm import ChatRequest, Gateway
from cochise.log import CostMetrics, RunLog, elapsed_ms

MAX_REPAIRS = 2

INVALID_INVOCATION_PATTERNS = (
    r"usage:",
    r"command not found",
    r"(unknown|unrecognized|unrecognised) (option|flag|argument)",
    r"invalid option",
)


class LimitStop(Exception):
    """A run limit tripped; ``reason`` is the run.end reason."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class LlmResult:
    action: str
    model: str
    messages: list[dict[str, str]]
    completion: str
    cost: CostMetrics
    duration_ms: int

    def payload(self, **extra: Any) -> dict[str, Any]:
        data = {
            "action": self.action.split(".", 1)[1],
            "model": self.model,
            "prompt": self.messages,
            "completion": self.completion,
            "duration_ms": self.duration_ms,
            "cost": self.cost.to_dict(),
        }
        data.update({k: v for k, v in extra.items() if v is not None})
        return data


class LlmCaller:
    """Calls the gateway and records LLM events with timing from the log clock."""

    def __init__(self, gateway: Gateway, log: RunLog):
        self.gateway = gateway
        self.log = log

    def invoke(self, action: str, model: str, messages: Sequence[Mapping[str, str]]) -> LlmResult:
        messages = [dict(m) for m in messages]
        started = self.log.clock.now()
        response = self.gateway.complete(ChatRequest(model=model, messages=messages, action=action))
        finished = self.log.clock.now()
        return LlmResult(action, model, messages, response.completion, response.cost, elapsed_ms(started, finished))

    def record(self, result: LlmResult, **extra: Any) -> int:
        return self.log.append(result.action, result.payload(**extra))


def repair_messages(messages: Sequence[Mapping[str, str]], bad_completion: str, feedback: str) -> list[dict[str, str]]:
    return [dict(m) for m in messages] + [
        {"role": "assistant", "content": bad_completion},
        {"role": "user", "content": feedback},
    ]


def compile_patterns(patterns: Sequence[str] = INVALID_INVOCATION_PATTERNS) -> list[re.Pattern]:
    return [re.compile(p, re.IGNORECASE) for p in patterns]


def is_invalid_invocation(result: CommandResult, patterns: Sequence[re.Pattern]) -> bool:
    """Nonzero exit plus a usage-style stderr: the command itself was wrong,
    as opposed to an environmental failure."""
    if result.exit_code in (None, 0):
        return False
    return any(p.search(result.stderr) for p in patterns)


LimitCheck = Callable[[], None]
