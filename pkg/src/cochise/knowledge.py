"""Shared world-view: findings and compromised accounts.

Model completions convey knowledge through line markers::

    FINDING: SMB signing disabled on 192.168.56.22
    ACCOUNT: north.sevenkingdoms.local\\jon.snow:Winter2024 [password]

Each mutation is mirrored to the run log, so ``KnowledgeStore.from_events``
rebuilds the store exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

from cochise.log import TrajectoryEvent, account_identity

SECRET_KINDS = ("password", "ntlm_hash", "ticket", "other")
MALFORMED_PREFIX = "[malformed ACCOUNT marker] "
ELISION = "- [... {n} older finding(s) elided ...]"
MIN_BUDGET = 1024

_FINDING_RE = re.compile(r"^\s*FINDING:\s*(?P<text>.*?)\s*$")
_ACCOUNT_RE = re.compile(r"^\s*ACCOUNT:\s*(?P<body>.*?)\s*$")
_ACCOUNT_BODY_RE = re.compile(
    r"^(?:(?P<domain>[^\\\s:]*)\\{1,2})?(?P<user>[^\\:\s]+):(?P<secret>\S.*?)(?:\s+\[(?P<kind>[\w-]+)\])?$"
)
_FENCE_RE = re.compile(r"^\s*```")


def normalize(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class Finding:
    text: str
    source: str = "executor"
    task_id: str | None = None
    origin_seq: int | None = None


@dataclass
class CompromisedAccount:
    domain: str
    username: str
    secrets: list[tuple[str, str]] = field(default_factory=list)  # (secret, kind)
    host: str | None = None

    @property
    def identity(self) -> str:
        return account_identity(self.domain, self.username)


@dataclass(frozen=True)
class AccountReport:
    """One ``ACCOUNT:`` marker as parsed, before it is merged into the store."""

    domain: str
    username: str
    secret: str
    kind: str = "password"
    host: str | None = None


def parse_knowledge_markers(completion: str) -> tuple[list[str], list[AccountReport]]:
    """Extract FINDING/ACCOUNT markers, skipping fenced code blocks.

    Malformed ACCOUNT lines are kept as findings with a marker prefix.
    """
    findings: list[str] = []
    accounts: list[AccountReport] = []
    in_fence = False
    for line in completion.splitlines():
        if _FENCE_RE.match(line):
            in_fence = not in_fence
            continue
        if in_fence:
            continue
        m = _FINDING_RE.match(line)
        if m:
            if m.group("text"):
                findings.append(m.group("text"))
            continue
        m = _ACCOUNT_RE.match(line)
        if not m:
            continue
        body = m.group("body")
        parsed = _ACCOUNT_BODY_RE.match(body)
        if not parsed:
            findings.append(MALFORMED_PREFIX + body)
            continue
        kind = (parsed.group("kind") or "password").lower()
        if kind not in SECRET_KINDS:
            kind = "other"
        accounts.append(
            AccountReport(
                domain=(parsed.group("domain") or "").lower(),
                username=parsed.group("user"),
                secret=parsed.group("secret"),
                kind=kind,
            )
        )
    return findings, accounts


class KnowledgeStore:
    """In-memory world-view.  ``log`` is an optional ``RunLog`` mirror."""

    def __init__(self, log=None):
        self.log = log
        self.findings: list[Finding] = []
        self._finding_keys: set[str] = set()
        self._accounts: dict[str, CompromisedAccount] = {}

    @property
    def accounts(self) -> list[CompromisedAccount]:
        return list(self._accounts.values())

    @property
    def distinct_account_count(self) -> int:
        return len(self._accounts)

    def _emit(self, event: str, payload: dict) -> int | None:
        if self.log is None:
            return None
        return self.log.append(event, payload)

    def add_finding(self, text: str, source: str = "executor", task_id: str | None = None) -> bool:
        text = normalize(text)
        if not text or text in self._finding_keys:
            return False
        seq = self._emit("knowledge.finding", {"text": text, "source": source, "task_id": task_id})
        self._finding_keys.add(text)
        self.findings.append(Finding(text, source, task_id, seq))
        return True

    def add_account(
        self,
        domain: str,
        username: str,
        secret: str,
        kind: str = "password",
        host: str | None = None,
        *,
        source: str = "executor",
        task_id: str | None = None,
    ) -> bool:
        """Merge one credential.  Returns True only for a new identity."""
        if not username or not username.strip():
            raise ValueError("account username must be non-empty")
        if kind not in SECRET_KINDS:
            raise ValueError(f"unknown secret kind {kind!r}")
        identity = account_identity(domain, username)
        existing = self._accounts.get(identity)
        if existing is not None and (secret, kind) in existing.secrets:
            return False
        self._emit(
            "knowledge.account",
            {
                "identity": identity,
                "domain": domain,
                "username": username,
                "secret": secret,
                "secret_kind": kind,
                "host": host,
                "new_identity": existing is None,
                "source": source,
                "task_id": task_id,
            },
        )
        if existing is None:
            self._accounts[identity] = CompromisedAccount(domain.lower(), username, [(secret, kind)], host)
            return True
        existing.secrets.append((secret, kind))
        if existing.host is None and host:
            existing.host = host
        return False

    def apply_markers(self, completion: str, source: str, task_id: str | None = None) -> None:
        findings, accounts = parse_knowledge_markers(completion)
        for text in findings:
            self.add_finding(text, source, task_id)
        for acct in accounts:
            self.add_account(acct.domain, acct.username, acct.secret, acct.kind, acct.host,
                             source=source, task_id=task_id)

    @classmethod
    def from_events(cls, events: Iterable[TrajectoryEvent]) -> "KnowledgeStore":
        """Rebuild the store from knowledge events (no log mirror)."""
        store = cls()
        for event in events:
            p = event.payload
            if event.event == "knowledge.finding":
                store.add_finding(p["text"], p.get("source", "executor"), p.get("task_id"))
            elif event.event == "knowledge.account":
                store.add_account(p.get("domain", ""), p["username"], p["secret"], p.get("secret_kind", "password"),
                                  p.get("host"), source=p.get("source", "executor"), task_id=p.get("task_id"))
        return store

    def render_worldview(self, budget: int = 8000) -> str:
        return render_worldview(self, budget)


def _account_line(acct: CompromisedAccount) -> str:
    secrets = "; ".join(f"{kind}: {secret}" for secret, kind in acct.secrets)
    line = f"- {acct.domain}\\{acct.username} ({secrets})"
    if acct.host:
        line += f" host: {acct.host}"
    return line


def render_worldview(store: KnowledgeStore, budget: int = 8000) -> str:
    """Deterministic Markdown: accounts first, then findings (newest last).

    Oldest findings are dropped first to fit ``budget`` characters.
    Accounts are never dropped, so a store with very many accounts can
    exceed the budget.
    """
    if budget < MIN_BUDGET:
        raise ValueError(f"budget must be >= {MIN_BUDGET}")
    head = ["## Compromised Accounts"]
    head += [_account_line(a) for a in store.accounts] or ["(none)"]
    head += ["", "## Findings"]
    findings = [f"- {f.text}" for f in store.findings]
    if not findings:
        return "\n".join(head + ["(none)"]) + "\n"

    def assemble(kept: list[str], dropped: int) -> str:
        lines = head + ([ELISION.format(n=dropped)] if dropped else []) + kept
        return "\n".join(lines) + "\n"

    text = assemble(findings, 0)
    if len(text) <= budget:
        return text
    # keep the newest findings that fit alongside the elision marker
    fixed = len(assemble([], len(findings)))
    room = budget - fixed
    kept: list[str] = []
    for line in reversed(findings):
        cost = len(line) + 1
        if cost > room:
            break
        kept.insert(0, line)
        room -= cost
    return assemble(kept, len(findings) - len(kept))
