"""Planner: strategy rounds over a Pentest-Task-Tree held outside the model.

Each round the prompt is rebuilt from the scenario, the current tree, the
last executor summary and the rendered world-view; no chat history is
carried between rounds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

from cochise import prompts
from cochise.agent import MAX_REPAIRS, LlmCaller, LlmResult, repair_messages
from cochise.knowledge import KnowledgeStore, normalize

STATUS_MARKS = {" ": "open", "x": "done", "X": "done", "!": "failed", ">": "in-progress"}
MISSION_COMPLETE = "MISSION COMPLETE"

_ITEM_RE = re.compile(r"^(?P<indent>[ \t]*)(?:[-*+]|\d+[.)])\s+\[(?P<mark>.)\]\s*(?P<desc>.*?)\s*$")
_BARE_ITEM_RE = re.compile(r"^[ \t]*(?:[-*+]|\d+[.)])\s+\S")
_HEADING_RE = re.compile(r"^###\s+(?P<title>.+?)\s*$")
_FENCE_RE = re.compile(r"^\s*```")


class ParseFailure(Exception):
    """Unusable model output; ``reason`` feeds the Reflexion repair prompt."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class PlannerError(Exception):
    pass


@dataclass
class Task:
    task_id: str
    status: str
    description: str
    depth: int
    children: list["Task"] = field(default_factory=list)


@dataclass
class PentestTaskTree:
    text: str
    tasks: list[Task]  # document order

    @classmethod
    def parse(cls, text: str) -> "PentestTaskTree":
        """Parse a Markdown checkbox list; the document itself is the root."""
        tasks: list[Task] = []
        roots: list[Task] = []
        stack: list[tuple[int, Task]] = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            m = _ITEM_RE.match(line)
            if not m:
                if _BARE_ITEM_RE.match(line):
                    raise ParseFailure(f"task without status marker on PTT line {line_no}")
                continue
            mark = m.group("mark")
            if mark not in STATUS_MARKS:
                raise ParseFailure(f"unknown status marker [{mark}] on PTT line {line_no}")
            indent = len(m.group("indent").expandtabs(4))
            while stack and stack[-1][0] >= indent:
                stack.pop()
            if stack:
                parent = stack[-1][1]
                task_id = f"{parent.task_id}.{len(parent.children) + 1}"
                task = Task(task_id, STATUS_MARKS[mark], m.group("desc"), parent.depth + 1)
                parent.children.append(task)
            else:
                task = Task(str(len(roots) + 1), STATUS_MARKS[mark], m.group("desc"), 0)
                roots.append(task)
            stack.append((indent, task))
            tasks.append(task)
        if not tasks:
            raise ParseFailure("empty task tree")
        if sum(t.status == "in-progress" for t in tasks) > 1:
            raise ParseFailure("multiple in-progress tasks")
        return cls(text, tasks)

    def with_status(self, status: str) -> list[Task]:
        return [t for t in self.tasks if t.status == status]

    @property
    def in_progress(self) -> Task | None:
        found = self.with_status("in-progress")
        return found[0] if found else None


@dataclass(frozen=True)
class TaskAssignment:
    task_id: str
    description: str
    context: str | None = None

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError("task description must be non-empty")


@dataclass(frozen=True)
class ExecutorSummary:
    task_id: str
    status: str  # success | failure | rounds-exhausted
    summary: str
    rounds_used: int


@dataclass
class StrategyDecision:
    ptt: PentestTaskTree
    assignment: TaskAssignment | None = None

    @property
    def complete(self) -> bool:
        return self.assignment is None


def _sections(completion: str) -> tuple[dict[str, list[str]], bool]:
    """Split on ``### `` headings outside code fences; detect the terminal marker."""
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    in_fence = False
    complete = False
    for line in completion.splitlines():
        if _FENCE_RE.match(line):
            in_fence = not in_fence
        elif not in_fence:
            heading = _HEADING_RE.match(line)
            if heading:
                current = sections.setdefault(heading.group("title").strip().upper(), [])
                continue
            if line.strip().strip("*#").strip() == MISSION_COMPLETE:
                complete = True
                continue
        if current is not None:
            current.append(line)
    return sections, complete


def _fenced(lines: list[str]) -> str | None:
    body: list[str] = []
    inside = False
    for line in lines:
        if _FENCE_RE.match(line):
            if inside:
                return "\n".join(body)
            inside = True
            continue
        if inside:
            body.append(line)
    return None


def _matches(task: Task, description: str) -> bool:
    a, b = normalize(task.description).casefold(), normalize(description).casefold()
    return bool(a) and (a == b or a in b or b in a)


def parse_planner_response(
    completion: str,
    *,
    require_task: bool = True,
    fresh_id: Callable[[], str] | None = None,
    previous: PentestTaskTree | None = None,
) -> StrategyDecision:
    sections, complete = _sections(completion)
    ptt_text = None
    if "PTT" in sections:
        ptt_text = _fenced(sections["PTT"])
        if ptt_text is None:
            raise ParseFailure("PTT section has no fenced block")
    if ptt_text is None:
        if not (complete and previous is not None):
            raise ParseFailure("missing ### PTT section")
        ptt = previous
    else:
        ptt = PentestTaskTree.parse(ptt_text)
    if complete or not require_task:
        return StrategyDecision(ptt)

    if "NEXT TASK" not in sections:
        raise ParseFailure("missing ### NEXT TASK section")
    description = "\n".join(sections["NEXT TASK"]).strip()
    if not description:
        raise ParseFailure("empty task")
    context = "\n".join(sections.get("CONTEXT", [])).strip() or None

    current = ptt.in_progress
    if current is not None:
        task_id = current.task_id
    else:
        match = next((t for t in ptt.with_status("open") if _matches(t, description)), None)
        if match is not None:
            task_id = match.task_id
        else:
            task_id = fresh_id() if fresh_id else "new-1"
    return StrategyDecision(ptt, TaskAssignment(task_id, description, context))


def format_summary(last: ExecutorSummary | None) -> str:
    if last is None:
        return "(no task executed yet)"
    return f"Task {last.task_id} ({last.status}, {last.rounds_used} rounds): {last.summary}"


class Planner:
    def __init__(
        self,
        scenario: str,
        caller: LlmCaller,
        knowledge: KnowledgeStore,
        model: str,
        *,
        worldview_budget: int = 8000,
        max_repairs: int = MAX_REPAIRS,
    ):
        self.scenario = scenario
        self.caller = caller
        self.knowledge = knowledge
        self.model = model
        self.worldview_budget = worldview_budget
        self.max_repairs = max_repairs
        self.rounds = 0
        self._fresh = 0

    @property
    def log(self):
        return self.caller.log

    def system_prompt(self) -> str:
        return prompts.PLANNER_SYSTEM.format(markers=prompts.MARKERS, scenario=self.scenario.strip())

    def _fresh_id(self) -> str:
        self._fresh += 1
        return f"new-{self._fresh}"

    def _negotiate(self, messages: list[dict[str, str]], parse: Callable[[str], StrategyDecision],
                   notes: Callable[[StrategyDecision], list[str]]) -> StrategyDecision:
        """One planner call plus up to ``max_repairs`` Reflexion repairs."""
        result: LlmResult = self.caller.invoke("planner.update_strategy", self.model, messages)
        repairs = 0
        while True:
            try:
                decision = parse(result.completion)
            except ParseFailure as failure:
                self._record(result, repairs, parse_error=failure.reason)
                if repairs >= self.max_repairs:
                    raise PlannerError(f"planner output unusable after {repairs} repairs: {failure.reason}")
                messages = repair_messages(
                    result.messages, result.completion, prompts.REPAIR_PARSE.format(reason=failure.reason)
                )
                repairs += 1
                result = self.caller.invoke("reflexion.repair", self.model, messages)
                continue
            self._record(result, repairs, notes=notes(decision) or None)
            return decision

    def _record(self, result: LlmResult, repairs: int, **extra) -> None:
        if result.action == "reflexion.repair":
            extra.update(role="planner", trigger="parse-failure", attempt=repairs)
        extra["round"] = self.rounds
        self.caller.record(result, **extra)
        self.knowledge.apply_markers(result.completion, "planner")

    def initial_ptt(self) -> PentestTaskTree:
        messages = [
            {"role": "system", "content": self.system_prompt()},
            {"role": "user", "content": prompts.PLANNER_BOOTSTRAP},
        ]

        def parse(completion: str) -> StrategyDecision:
            decision = parse_planner_response(completion, require_task=False)
            if decision.ptt.with_status("done"):
                raise ParseFailure("the initial tree must not contain completed tasks")
            return decision

        decision = self._negotiate(messages, parse, lambda d: [])
        self.log.append("ptt.update", {"ptt": decision.ptt.text, "round": 0})
        return decision.ptt

    def strategy_round(
        self, ptt: PentestTaskTree, last: ExecutorSummary | None, worldview: str | None = None
    ) -> StrategyDecision:
        self.rounds += 1
        if worldview is None:
            worldview = self.knowledge.render_worldview(self.worldview_budget)
        messages = [
            {"role": "system", "content": self.system_prompt()},
            {
                "role": "user",
                "content": prompts.PLANNER_ROUND.format(
                    ptt=ptt.text.strip("\n"), last=format_summary(last), worldview=worldview.rstrip("\n")
                ),
            },
        ]

        def parse(completion: str) -> StrategyDecision:
            return parse_planner_response(completion, fresh_id=self._fresh_id, previous=ptt)

        def notes(decision: StrategyDecision) -> list[str]:
            kept = {normalize(t.description).casefold() for t in decision.ptt.tasks}
            dropped = [t.task_id for t in ptt.with_status("done") if normalize(t.description).casefold() not in kept]
            return [f"revised tree dropped completed task(s) {', '.join(dropped)}"] if dropped else []

        decision = self._negotiate(messages, parse, notes)
        self.log.append("ptt.update", {"ptt": decision.ptt.text, "round": self.rounds})
        if decision.assignment is not None:
            a = decision.assignment
            self.log.append(
                "planner.select_task",
                {"task_id": a.task_id, "description": a.description, "context": a.context, "round": self.rounds},
            )
        return decision
