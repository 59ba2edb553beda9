"""Run configuration: TOML file, environment, CLI overrides (CLI > env > file)."""

from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping

from cochise.channel import ChannelDescriptor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_OVERRIDES = {
    "COCHISE_PLANNER_MODEL": "planner_model",
    "COCHISE_EXECUTOR_MODEL": "executor_model",
    "COCHISE_LOG_DIR": "log_dir",
    "COCHISE_MAX_BUDGET": "max_usd_budget",
    "COCHISE_SSH_PASSWORD": "ssh_password",
}


class ConfigError(ValueError):
    pass


def toml_loads(text: str) -> dict[str, Any]:
    return tomllib.loads(text, parse_float=Decimal)


@dataclass(frozen=True)
class Limits:
    max_planner_rounds: int = 50
    max_wallclock_minutes: float = 240
    max_usd_budget: Decimal | None = None
    executor_max_rounds: int = 15

    def __post_init__(self):
        if self.max_planner_rounds < 1 or self.executor_max_rounds < 1:
            raise ConfigError("round limits must be positive")
        if self.max_wallclock_minutes <= 0:
            raise ConfigError("max_wallclock_minutes must be positive")
        if self.max_usd_budget is not None:
            object.__setattr__(self, "max_usd_budget", Decimal(str(self.max_usd_budget)))
            if self.max_usd_budget < 0:
                raise ConfigError("max_usd_budget must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_planner_rounds": self.max_planner_rounds,
            "max_wallclock_minutes": float(self.max_wallclock_minutes),
            "max_usd_budget": None if self.max_usd_budget is None else str(self.max_usd_budget),
            "executor_max_rounds": self.executor_max_rounds,
        }


@dataclass(frozen=True)
class RunConfig:
    planner_model: str = "openai/gpt-4o"
    executor_model: str | None = None
    channel: ChannelDescriptor = field(default_factory=ChannelDescriptor)
    scenario_path: str | None = None
    log_dir: str = "logs"
    limits: Limits = field(default_factory=Limits)
    price_table_path: str | None = None
    prices: Mapping[str, Any] = field(default_factory=dict)
    providers: Mapping[str, str] = field(default_factory=dict)
    goal_spec: tuple[str, ...] | None = None
    scripted_llm: str | None = None
    scenario_text: str | None = None

    @property
    def effective_executor_model(self) -> str:
        return self.executor_model or self.planner_model

    def scenario(self) -> str:
        if self.scenario_text is not None:
            text = self.scenario_text
        elif self.scenario_path:
            text = Path(self.scenario_path).read_text(encoding="utf-8")
        else:
            raise ConfigError("no scenario prompt given (use --scenario)")
        if not text.strip():
            raise ConfigError("scenario prompt is empty")
        return text

    def snapshot(self, scenario: str, price_table: Mapping[str, Any]) -> dict[str, Any]:
        """Config record stored in ``run.start`` (secrets redacted)."""
        return {
            "planner_model": self.planner_model,
            "executor_model": self.effective_executor_model,
            "scenario": scenario,
            "scenario_sha256": hashlib.sha256(scenario.encode("utf-8")).hexdigest(),
            "limits": self.limits.to_dict(),
            "channel": self.channel.redacted(),
            "providers": dict(sorted(self.providers.items())),
            "prices": dict(price_table),
            "goal_spec": list(self.goal_spec) if self.goal_spec else None,
        }


def _channel_from(data: Mapping[str, Any], base: Path) -> ChannelDescriptor:
    known = {"kind", "host", "port", "username", "password", "key_path", "command_timeout", "allow_local",
             "fixture", "known_hosts"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown [channel] key(s): {sorted(unknown)}")
    values = dict(data)
    for key in ("fixture", "key_path"):
        if values.get(key):
            values[key] = str((base / values[key]).expanduser())
    if "command_timeout" in values:
        values["command_timeout"] = float(values["command_timeout"])
    return ChannelDescriptor(**values)


def load_config(
    path: str | os.PathLike | None = None,
    *,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    defaults: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge built-in defaults < ``defaults`` < file < environment < ``overrides``."""
    environ = os.environ if environ is None else environ
    data: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        data = toml_loads(path.read_text(encoding="utf-8"))
        base = path.parent

    flat: dict[str, Any] = dict(defaults or {})
    flat.update({k: v for k, v in data.items() if not isinstance(v, dict)})
    # paths in the file are relative to the file; env/CLI paths to the cwd
    for key in ("scenario", "price_table", "log_dir"):
        if isinstance(flat.get(key), str):
            flat[key] = str(base / flat[key])
    limits = dict(data.get("limits", {}))
    channel = dict(data.get("channel", {}))
    for env_name, key in ENV_OVERRIDES.items():
        if env_name in environ:
            flat[key] = environ[env_name]
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})

    for key in ("max_planner_rounds", "max_wallclock_minutes", "max_usd_budget", "executor_max_rounds"):
        if key in flat:
            limits[key] = flat.pop(key)
    for key in ("max_planner_rounds", "executor_max_rounds"):
        if key in limits:
            limits[key] = int(limits[key])
    if "max_wallclock_minutes" in limits:
        limits["max_wallclock_minutes"] = float(limits["max_wallclock_minutes"])
    if "ssh_password" in flat:
        channel["password"] = flat.pop("ssh_password")
    if flat.get("mock_testbed"):
        channel = {"kind": "mock", "fixture": str(Path(flat.pop("mock_testbed")).resolve())}
        base_for_channel = Path.cwd()
    else:
        base_for_channel = base

    try:
        config = RunConfig(
            planner_model=str(flat.get("planner_model", RunConfig.planner_model)),
            executor_model=flat.get("executor_model"),
            channel=_channel_from(channel, base_for_channel) if channel else ChannelDescriptor(kind="ssh"),
            scenario_path=flat.get("scenario"),
            log_dir=str(flat.get("log_dir", "logs")),
            limits=Limits(**limits),
            price_table_path=flat.get("price_table"),
            prices=data.get("prices", {}),
            providers={name: str(p["base_url"]) for name, p in data.get("providers", {}).items()},
            goal_spec=tuple(flat["goals"]) if flat.get("goals") else None,
            scripted_llm=flat.get("scripted_llm"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def with_overrides(config: RunConfig, **changes: Any) -> RunConfig:
    return replace(config, **changes)
