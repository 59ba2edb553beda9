"""Deterministic fixture-driven fake target environment.

A fixture is a JSON document of hosts and ordered shell-response rules.
``execute`` is a pure transition: ``(state, cmd) -> (result, new_state)``.
First matching rule whose requirements hold wins; a rule with unmet
requirements falls through to later rules.  See ``docs/fixtures.md``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from cochise.channel import CommandResult


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class Response:
    stdout: str = ""
    stderr: str = ""
    exit_code: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Response":
        return cls(data.get("stdout", ""), data.get("stderr", ""), int(data.get("exit_code", 0)))

    def render(self, cmd: str, **extra: str) -> CommandResult:
        words = cmd.split()
        subs = {"{cmd}": cmd, "{argv0}": words[0] if words else "", **{"{%s}" % k: v for k, v in extra.items()}}
        out, err = self.stdout, self.stderr
        for key, value in subs.items():
            out = out.replace(key, value)
            err = err.replace(key, value)
        return CommandResult(out, err, self.exit_code, 0, False)


@dataclass(frozen=True)
class Rule:
    name: str
    prefix: str | None
    regex: re.Pattern | None
    default: bool
    requires: Mapping[str, tuple[str, ...]]
    response: Response
    effects: Mapping[str, Any]

    def matches(self, cmd: str) -> bool:
        if self.default:
            return True
        if self.prefix is not None:
            return cmd.strip().startswith(self.prefix)
        return bool(self.regex.search(cmd))


@dataclass(frozen=True)
class Host:
    name: str
    address: str
    services: tuple[str, ...] = ()

    def referenced_by(self, cmd: str) -> bool:
        pattern = r"(?<![\w.])(%s|%s)(?![\w])" % (re.escape(self.address), re.escape(self.name))
        return re.search(pattern, cmd, re.IGNORECASE) is not None


@dataclass(frozen=True)
class TestbedFixture:
    __test__ = False  # not a pytest class

    name: str
    hosts: tuple[Host, ...]
    rules: tuple[Rule, ...]
    initial: "TestbedState"
    lockout_threshold: int = 3
    lockout_response: Response = Response("", "STATUS_ACCOUNT_LOCKED_OUT", 1)
    connection_failure: Response = Response("", "connect to {host} ({address}): host is down", 1)
    scenario: str = ""

    def host(self, name: str) -> Host:
        for host in self.hosts:
            if host.name == name:
                return host
        raise KeyError(name)


@dataclass(frozen=True)
class TestbedState:
    __test__ = False

    revealed: frozenset = frozenset()
    credentials: frozenset = frozenset()
    flags: frozenset = frozenset()
    crashed: frozenset = frozenset()
    locked: frozenset = frozenset()
    failed_logins: tuple = ()  # sorted (account, count) pairs

    def failures(self, account: str) -> int:
        return dict(self.failed_logins).get(account, 0)


_REQUIRE_KEYS = {"revealed", "credentials", "flags", "not_locked", "not_flags"}
_EFFECT_KEYS = {"reveal", "grant", "flag", "crash", "fail_login"}


def _names(value: Any, where: str) -> tuple[str, ...]:
    if isinstance(value, str):
        return (value,)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise FixtureError(f"{where}: expected a string or list of strings")
    return tuple(value)


def parse_fixture(data: Mapping[str, Any], source: str = "<fixture>") -> TestbedFixture:
    hosts = []
    for i, h in enumerate(data.get("hosts", [])):
        try:
            hosts.append(Host(h["name"], h["address"], tuple(h.get("services", []))))
        except KeyError as exc:
            raise FixtureError(f"{source}: hosts[{i}]: missing {exc}") from None
    host_names = {h.name for h in hosts}

    rules = []
    for i, r in enumerate(data.get("rules", [])):
        where = f"{source}: rules[{i}]"
        match = r.get("match", {})
        prefix = regex = None
        default = bool(r.get("default", False))
        if not default:
            if "prefix" in match:
                prefix = str(match["prefix"])
            elif "regex" in match:
                try:
                    regex = re.compile(match["regex"])
                except re.error as exc:
                    raise FixtureError(f"{where}.match.regex: invalid pattern: {exc}") from None
            else:
                raise FixtureError(f"{where}: match needs 'prefix' or 'regex' (or set default: true)")
        requires = r.get("requires", {})
        unknown = set(requires) - _REQUIRE_KEYS
        if unknown:
            raise FixtureError(f"{where}.requires: unknown key(s) {sorted(unknown)}")
        if default and requires:
            raise FixtureError(f"{where}: a default rule cannot have requirements")
        effects = r.get("effects", {})
        unknown = set(effects) - _EFFECT_KEYS
        if unknown:
            raise FixtureError(f"{where}.effects: unknown key(s) {sorted(unknown)}")
        for key in ("reveal", "crash"):
            for name in _names(effects.get(key, []), f"{where}.effects.{key}"):
                if name not in host_names:
                    raise FixtureError(f"{where}.effects.{key}: unknown host {name!r}")
        if "fail_login" in effects and not isinstance(effects["fail_login"], str):
            raise FixtureError(f"{where}.effects.fail_login: expected an account string")
        rules.append(
            Rule(
                name=r.get("name", f"rule-{i}"),
                prefix=prefix,
                regex=regex,
                default=default,
                requires={k: _names(v, f"{where}.requires.{k}") for k, v in requires.items()},
                response=Response.from_dict(r.get("response", {})),
                effects=dict(effects),
            )
        )
    if not any(rule.default for rule in rules):
        raise FixtureError(f"{source}: fixture has no default rule (add one with \"default\": true)")

    init = data.get("initial_state", {})
    initial = TestbedState(
        revealed=frozenset(init.get("revealed", [])),
        credentials=frozenset(init.get("credentials", [])),
        flags=frozenset(init.get("flags", [])),
    )
    extra = {}
    if "lockout_response" in data:
        extra["lockout_response"] = Response.from_dict(data["lockout_response"])
    if "connection_failure" in data:
        extra["connection_failure"] = Response.from_dict(data["connection_failure"])
    return TestbedFixture(
        name=data.get("name", Path(source).stem),
        hosts=tuple(hosts),
        rules=tuple(rules),
        initial=initial,
        lockout_threshold=int(data.get("lockout_threshold", 3)),
        scenario=data.get("scenario", ""),
        **extra,
    )


def load_fixture(path: str | Path) -> TestbedFixture:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FixtureError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return parse_fixture(data, str(path))


def initial_state(fixture: TestbedFixture) -> TestbedState:
    return fixture.initial


def _satisfied(rule: Rule, state: TestbedState) -> bool:
    req = rule.requires
    return (
        all(h in state.revealed for h in req.get("revealed", ()))
        and all(c in state.credentials for c in req.get("credentials", ()))
        and all(f in state.flags for f in req.get("flags", ()))
        and not any(f in state.flags for f in req.get("not_flags", ()))
        and not any(a in state.locked for a in req.get("not_locked", ()))
    )


def execute(state: TestbedState, fixture: TestbedFixture, cmd: str) -> tuple[CommandResult, TestbedState]:
    for name in sorted(state.crashed):
        host = fixture.host(name)
        if host.referenced_by(cmd):
            return fixture.connection_failure.render(cmd, host=host.name, address=host.address), state

    for rule in fixture.rules:
        if not rule.matches(cmd) or not _satisfied(rule, state):
            continue
        effects = rule.effects
        account = effects.get("fail_login")
        if account is not None:
            if account in state.locked:
                return fixture.lockout_response.render(cmd, account=account), state
            counts = dict(state.failed_logins)
            counts[account] = counts.get(account, 0) + 1
            state = replace(state, failed_logins=tuple(sorted(counts.items())))
            if counts[account] >= fixture.lockout_threshold:
                state = replace(state, locked=state.locked | {account})
                return fixture.lockout_response.render(cmd, account=account), state
        state = replace(
            state,
            revealed=state.revealed | set(_names(effects.get("reveal", []), "")),
            credentials=state.credentials | set(_names(effects.get("grant", []), "")),
            flags=state.flags | set(_names(effects.get("flag", []), "")),
            crashed=state.crashed | set(_names(effects.get("crash", []), "")),
        )
        return rule.response.render(cmd), state
    raise AssertionError("unreachable: fixtures always carry a default rule")
