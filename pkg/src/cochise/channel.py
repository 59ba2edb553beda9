"""Execution channels: the only way the agent touches a shell.

``ssh`` is the production channel.  ``local`` runs on the harness host and
must be explicitly allowed; ``mock`` is backed by a fixture testbed.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import paramiko

from cochise.log import REDACTED

logger = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 30.0
KILL_GRACE = 0.2


class ChannelError(Exception):
    pass


class ChannelClosed(ChannelError):
    def __init__(self):
        super().__init__("channel closed")


class ChannelAuthError(ChannelError):
    pass


@dataclass(frozen=True)
class ChannelDescriptor:
    kind: str = "ssh"
    host: str | None = None
    port: int = 22
    username: str | None = None
    password: str | None = None
    key_path: str | None = None
    command_timeout: float = 300.0
    # local channels bypass the isolation boundary; tests and demos only
    allow_local: bool = False
    fixture: str | None = None
    known_hosts: str | None = None

    def validate(self) -> None:
        if self.kind not in ("ssh", "local", "mock"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "ssh":
            if not self.host or not self.username or not (self.password or self.key_path):
                raise ValueError("ssh channel needs host, username and a password or key_path")
        if self.kind == "mock" and not self.fixture:
            raise ValueError("mock channel needs a fixture path")
        if self.kind == "local" and not self.allow_local:
            raise ValueError("local channel requires allow_local = true (agent would run on the harness host)")
        if self.command_timeout <= 0:
            raise ValueError("command_timeout must be positive")

    def redacted(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "command_timeout": self.command_timeout}
        if self.kind == "ssh":
            out.update(host=self.host, port=self.port, username=self.username)
            out["auth"] = "password" if self.password else "publickey"
            if self.password:
                out["password"] = REDACTED
            if self.key_path:
                out["key_path"] = self.key_path
        if self.kind == "mock":
            out["fixture"] = Path(self.fixture).name
        return out

    @property
    def secrets(self) -> list[str]:
        return [self.password] if self.password else []


@dataclass
class CommandResult:
    stdout: str = ""
    stderr: str = ""
    exit_code: int | None = None
    duration_ms: int = 0
    timed_out: bool = False
    error: str | None = None


def decode(data: bytes) -> str:
    return data.decode("utf-8", errors="replace")


class Channel:
    kind = "abstract"

    def __init__(self):
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def run_command(self, cmd: str) -> CommandResult:
        if self._closed:
            raise ChannelClosed()
        if not cmd or not cmd.strip():
            raise ValueError("empty command")
        return self._run(cmd)

    def _run(self, cmd: str) -> CommandResult:
        raise NotImplementedError

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._close()

    def _close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalChannel(Channel):
    kind = "local"

    def __init__(self, command_timeout: float = 300.0):
        super().__init__()
        self.command_timeout = command_timeout

    def _run(self, cmd: str) -> CommandResult:
        started = time.monotonic()
        proc = subprocess.Popen(
            ["bash", "-c", cmd],
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, err = proc.communicate(timeout=self.command_timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_group(proc.pid, signal.SIGTERM)
            try:
                out, err = proc.communicate(timeout=KILL_GRACE)
            except subprocess.TimeoutExpired:
                _kill_group(proc.pid, signal.SIGKILL)
                out, err = proc.communicate()
        duration = int((time.monotonic() - started) * 1000)
        return CommandResult(
            stdout=decode(out or b""),
            stderr=decode(err or b""),
            exit_code=None if timed_out else proc.returncode,
            duration_ms=duration,
            timed_out=timed_out,
        )


def _kill_group(pid: int, sig: int) -> None:
    try:
        os.killpg(pid, sig)
    except ProcessLookupError:
        pass


class TofuPolicy(paramiko.MissingHostKeyPolicy):
    """Trust-on-first-use: accept and persist unknown keys.

    Changed keys for a known host are rejected by paramiko itself.
    """

    def __init__(self, path: Path):
        self.path = path

    def missing_host_key(self, client, hostname, key):
        client.get_host_keys().add(hostname, key.get_name(), key)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        client.save_host_keys(str(self.path))
        logger.info("trusting new host key for %s (%s)", hostname, key.get_name())


class SSHChannel(Channel):
    """One exec channel (fresh remote shell) per command over one session."""

    kind = "ssh"

    def __init__(self, descriptor: ChannelDescriptor, known_hosts: str | os.PathLike | None = None):
        super().__init__()
        self.descriptor = descriptor
        self.known_hosts = Path(known_hosts or descriptor.known_hosts or Path.home() / ".cochise" / "known_hosts")
        self._client = None
        self._open()

    def _open(self) -> None:
        d = self.descriptor
        client = paramiko.SSHClient()
        if self.known_hosts.exists():
            client.load_host_keys(str(self.known_hosts))
        client.set_missing_host_key_policy(TofuPolicy(self.known_hosts))
        try:
            client.connect(
                d.host,
                port=d.port,
                username=d.username,
                password=d.password,
                key_filename=d.key_path,
                timeout=HANDSHAKE_TIMEOUT,
                banner_timeout=HANDSHAKE_TIMEOUT,
                auth_timeout=HANDSHAKE_TIMEOUT,
                allow_agent=False,
                look_for_keys=False,
            )
        except paramiko.AuthenticationException as exc:
            client.close()
            raise ChannelAuthError(f"ssh authentication failed for {d.username}@{d.host}: {exc}") from exc
        except (OSError, paramiko.SSHException) as exc:
            client.close()
            raise ChannelError(f"ssh connection to {d.host}:{d.port} failed: {exc}") from exc
        self._client = client

    def _alive(self) -> bool:
        transport = self._client.get_transport() if self._client else None
        return transport is not None and transport.is_active()

    def _ensure(self) -> None:
        if not self._alive():
            logger.warning("ssh session lost; reconnecting once")
            if self._client:
                self._client.close()
            self._open()

    def _run(self, cmd: str) -> CommandResult:
        self._ensure()
        started = time.monotonic()
        out, err = bytearray(), bytearray()
        try:
            chan = self._client.get_transport().open_session(timeout=HANDSHAKE_TIMEOUT)
            chan.settimeout(0.05)
            chan.exec_command(cmd)
            deadline = started + self.descriptor.command_timeout
            timed_out = False
            while True:
                _drain(chan, out, err)
                if chan.exit_status_ready() and not chan.recv_ready() and not chan.recv_stderr_ready():
                    break
                if chan.closed and not chan.recv_ready():
                    break
                if time.monotonic() >= deadline:
                    timed_out = True
                    break
                time.sleep(0.01)
            exit_code = None
            if timed_out:
                _send_signal(chan, "TERM")
                grace = time.monotonic() + KILL_GRACE
                while time.monotonic() < grace and not chan.exit_status_ready():
                    _drain(chan, out, err)
                    time.sleep(0.01)
                _send_signal(chan, "KILL")
                _drain(chan, out, err)
                chan.close()
            else:
                _drain(chan, out, err)
                exit_code = chan.recv_exit_status() if chan.exit_status_ready() else None
                chan.close()
            error = None if (timed_out or exit_code is not None) else "channel closed without exit status"
        except (OSError, EOFError, paramiko.SSHException) as exc:
            return CommandResult(
                decode(bytes(out)), decode(bytes(err)), None,
                int((time.monotonic() - started) * 1000), False, f"channel error: {exc}",
            )
        return CommandResult(
            decode(bytes(out)), decode(bytes(err)), exit_code,
            int((time.monotonic() - started) * 1000), timed_out, error,
        )

    def _close(self) -> None:
        if self._client:
            self._client.close()
            self._client = None


def _drain(chan, out: bytearray, err: bytearray) -> None:
    while chan.recv_ready():
        out.extend(chan.recv(65536))
    while chan.recv_stderr_ready():
        err.extend(chan.recv_stderr(65536))


def _send_signal(chan, name: str) -> None:
    """Send an RFC 4254 "signal" channel request (best effort)."""
    if chan.closed:
        return
    m = paramiko.Message()
    m.add_byte(paramiko.common.cMSG_CHANNEL_REQUEST)
    m.add_int(chan.remote_chanid)
    m.add_string("signal")
    m.add_boolean(False)
    m.add_string(name)
    try:
        chan.transport._send_user_message(m)
    except Exception:  # noqa: BLE001 - signalling a dying channel is best effort
        pass


class MockChannel(Channel):
    """Channel backed by a fixture testbed state machine."""

    kind = "mock"

    def __init__(self, fixture, on_reset: Callable[[], None] | None = None):
        from cochise.testbed import initial_state

        super().__init__()
        self.fixture = fixture
        self.state = initial_state(fixture)
        self.sent: list[str] = []
        self.on_reset = on_reset

    def _run(self, cmd: str) -> CommandResult:
        from cochise.testbed import execute

        self.sent.append(cmd)
        result, self.state = execute(self.state, self.fixture, cmd)
        return result

    def _close(self) -> None:
        from cochise.testbed import initial_state

        self.state = initial_state(self.fixture)
        if self.on_reset:
            self.on_reset()


def connect(descriptor: ChannelDescriptor, *, known_hosts: str | os.PathLike | None = None) -> Channel:
    """Open and verify a channel (runs ``true`` once)."""
    descriptor.validate()
    if descriptor.kind == "local":
        channel: Channel = LocalChannel(descriptor.command_timeout)
    elif descriptor.kind == "mock":
        from cochise.testbed import load_fixture

        channel = MockChannel(load_fixture(descriptor.fixture))
        return channel
    else:
        channel = SSHChannel(descriptor, known_hosts)
    check = channel.run_command("true")
    if check.exit_code != 0:
        channel.close()
        raise ChannelError(f"channel verification failed: exit={check.exit_code} {check.stderr.strip()}")
    return channel


def close(channel: Channel) -> None:
    channel.close()
