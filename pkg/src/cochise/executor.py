"""Executor: an ephemeral ReAct agent instantiated once per task.

The transcript lives only inside ``run_episode``; nothing carries over to
the next task except the summary handed back to the planner.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

from cochise import prompts
from cochise.agent import (
    INVALID_INVOCATION_PATTERNS,
    MAX_REPAIRS,
    LimitStop,
    LlmCaller,
    LlmResult,
    compile_patterns,
    is_invalid_invocation,
    repair_messages,
)
from cochise.channel import Channel, CommandResult
from cochise.knowledge import KnowledgeStore
from cochise.log import command_payload
from cochise.planner import ExecutorSummary, ParseFailure, TaskAssignment

DEFAULT_MAX_ROUNDS = 15
OBSERVATION_BUDGET = 12000
BASH_TAGS = {"bash", "sh", "shell"}

_OPEN_FENCE = re.compile(r"^\s*```\s*(?P<tag>[\w+-]*)\s*$")
_CLOSE_FENCE = re.compile(r"^\s*```\s*$")


@dataclass(frozen=True)
class Command:
    cmd: str
    extra_blocks: int = 0


@dataclass(frozen=True)
class Complete:
    summary: str


@dataclass(frozen=True)
class GiveUp:
    reason: str


def _bash_blocks(completion: str) -> list[str]:
    blocks: list[str] = []
    lines = completion.splitlines()
    i = 0
    while i < len(lines):
        m = _OPEN_FENCE.match(lines[i])
        if not m:
            i += 1
            continue
        tag = m.group("tag").lower()
        body: list[str] = []
        i += 1
        while i < len(lines) and not _CLOSE_FENCE.match(lines[i]):
            body.append(lines[i])
            i += 1
        i += 1
        if tag in BASH_TAGS:
            blocks.append("\n".join(body))
    return blocks


def parse_action(completion: str) -> Command | Complete | GiveUp:
    blocks = _bash_blocks(completion)
    if blocks:
        cmd = blocks[0].strip("\n")
        if not cmd.strip():
            raise ParseFailure("empty command block")
        return Command(cmd, len(blocks) - 1)
    for line in completion.splitlines():
        stripped = line.strip()
        if stripped.startswith("TASK COMPLETE:"):
            return Complete(stripped[len("TASK COMPLETE:"):].strip())
        if stripped.startswith("GIVING UP:"):
            return GiveUp(stripped[len("GIVING UP:"):].strip())
    raise ParseFailure("no action found")


def _clip(text: str, budget: int) -> str:
    if len(text) <= budget:
        return text
    head = budget * 2 // 3
    tail = budget - head
    elided = len(text) - head - tail
    return f"{text[:head]}\n[... {elided} characters elided ...]\n{text[-tail:]}"


def status_line(result: CommandResult) -> str:
    if result.timed_out:
        return f"[timed out after {result.duration_ms} ms, no exit code]"
    if result.exit_code is None:
        return f"[{result.error or 'channel error'}, no exit code, {result.duration_ms} ms]"
    return f"[exit code {result.exit_code}, {result.duration_ms} ms]"


def truncate_observation(result: CommandResult, per_stream_budget: int = OBSERVATION_BUDGET) -> str:
    parts = []
    if result.stdout:
        parts.append("STDOUT:\n" + _clip(result.stdout, per_stream_budget))
    if result.stderr:
        parts.append("STDERR:\n" + _clip(result.stderr, per_stream_budget))
    parts.append(status_line(result))
    return "\n".join(parts)


class Executor:
    def __init__(
        self,
        caller: LlmCaller,
        knowledge: KnowledgeStore,
        model: str,
        *,
        max_rounds: int = DEFAULT_MAX_ROUNDS,
        observation_budget: int = OBSERVATION_BUDGET,
        invalid_patterns: Sequence[str] = INVALID_INVOCATION_PATTERNS,
        max_repairs: int = MAX_REPAIRS,
        check_limits: Callable[[], None] | None = None,
    ):
        if max_rounds < 1:
            raise ValueError("max_rounds must be positive")
        self.caller = caller
        self.knowledge = knowledge
        self.model = model
        self.max_rounds = max_rounds
        self.observation_budget = observation_budget
        self.patterns = compile_patterns(invalid_patterns)
        self.max_repairs = max_repairs
        self.check_limits = check_limits or (lambda: None)

    @property
    def log(self):
        return self.caller.log

    def run_episode(self, task: TaskAssignment, channel: Channel) -> ExecutorSummary:
        self.log.append(
            "task.start",
            {"task_id": task.task_id, "description": task.description, "context": task.context,
             "max_rounds": self.max_rounds},
        )
        user = prompts.EXECUTOR_TASK.format(task_id=task.task_id, description=task.description)
        if task.context:
            user += prompts.EXECUTOR_TASK_CONTEXT.format(context=task.context)
        base = [
            {"role": "system", "content": prompts.EXECUTOR_SYSTEM.format(markers=prompts.MARKERS)},
            {"role": "user", "content": user},
        ]
        transcript: list[dict[str, str]] = list(base)
        rounds = 0
        try:
            outcome = None
            while rounds < self.max_rounds:
                self.check_limits()
                rounds += 1
                outcome, transcript = self._step(task, channel, transcript, rounds)
                if outcome is not None:
                    break
            if outcome is None:
                summary = self._summarize(task, transcript, rounds)
                outcome = ("rounds-exhausted", summary)
        except BaseException as exc:
            reason = exc.reason if isinstance(exc, LimitStop) else type(exc).__name__
            if not self.log.closed:
                self._end(task, "failure", f"episode aborted: {reason}", rounds)
            raise
        status, summary = outcome
        return self._end(task, status, summary, rounds)

    def _end(self, task: TaskAssignment, status: str, summary: str, rounds: int) -> ExecutorSummary:
        result = ExecutorSummary(task.task_id, status, summary.strip() or f"task ended ({status})", rounds)
        self.log.append(
            "task.end",
            {"task_id": task.task_id, "status": status, "summary": result.summary, "rounds_used": rounds},
        )
        return result

    def _record(self, result: LlmResult, task: TaskAssignment, step: int, **extra) -> None:
        self.caller.record(result, task_id=task.task_id, step=step, **extra)
        self.knowledge.apply_markers(result.completion, "executor", task.task_id)

    def _step(self, task, channel, transcript, step):
        """One round: a model call plus up to ``max_repairs`` Reflexion repairs."""
        current = self.caller.invoke("executor.step", self.model, transcript)
        repairs = 0
        repair_meta: dict = {}
        while True:
            try:
                action = parse_action(current.completion)
                failure = None
            except ParseFailure as exc:
                action, failure = None, exc
            self._record(
                current, task, step,
                action=None if action is None else type(action).__name__.lower(),
                parse_error=failure.reason if failure else None,
                **repair_meta,
            )
            if failure is not None:
                if repairs >= self.max_repairs:
                    note = f"No valid action ({failure.reason}); this round is lost."
                    return None, current.messages + [
                        {"role": "assistant", "content": current.completion},
                        {"role": "user", "content": note},
                    ]
                feedback = prompts.REPAIR_PARSE.format(reason=failure.reason)
                repairs += 1
                repair_meta = {"role": "executor", "trigger": "parse-failure", "attempt": repairs}
                current = self.caller.invoke(
                    "reflexion.repair", self.model, repair_messages(current.messages, current.completion, feedback)
                )
                continue
            if isinstance(action, Complete):
                return ("success", action.summary), transcript
            if isinstance(action, GiveUp):
                return ("failure", action.reason or "executor gave up"), transcript

            result = channel.run_command(action.cmd)
            self.log.append("cmd.execute", command_payload(action.cmd, result, task.task_id))
            observation = truncate_observation(result, self.observation_budget)
            if action.extra_blocks:
                observation = prompts.EXTRA_BLOCKS_NOTE.format(n=action.extra_blocks + 1) + "\n" + observation
            if is_invalid_invocation(result, self.patterns) and repairs < self.max_repairs:
                feedback = prompts.REPAIR_COMMAND.format(observation=observation)
                repairs += 1
                repair_meta = {"role": "executor", "trigger": "invalid-invocation", "attempt": repairs}
                current = self.caller.invoke(
                    "reflexion.repair", self.model, repair_messages(current.messages, current.completion, feedback)
                )
                continue
            return None, current.messages + [
                {"role": "assistant", "content": current.completion},
                {"role": "user", "content": observation},
            ]

    def _summarize(self, task, transcript, rounds) -> str:
        messages = transcript + [{"role": "user", "content": prompts.EXECUTOR_SUMMARIZE.format(rounds=rounds)}]
        result = self.caller.invoke("executor.summarize", self.model, messages)
        self._record(result, task, rounds)
        return result.completion.strip()
