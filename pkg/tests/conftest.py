import os
import socket
import subprocess
import threading
from pathlib import Path

import paramiko
import pytest

from cochise.config import load_config
from cochise.log import SteppingClock, deterministic_run_ids
from cochise.orchestrator import run

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
MINI_GOAD = FIXTURES / "mini-goad.json"
E2E_SCRIPT = FIXTURES / "e2e-script.json"
NEVER_SCRIPT = FIXTURES / "never-complete-script.json"
METRIC_LOG = FIXTURES / "metric-run.jsonl"

SSH_USER = "tester"
SSH_PASSWORD = "loopback-pw"

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def scripted_run(log_dir, script=E2E_SCRIPT, fixture=MINI_GOAD, **overrides):
    """Run the orchestrator in-process with a fixed clock."""
    from cochise.llm import load_script

    defaults = {"planner_model": load_script(script)["model"]}
    config = load_config(
        None,
        overrides={"mock_testbed": str(fixture), "scripted_llm": str(script), "log_dir": str(log_dir), **overrides},
        environ={},
        defaults=defaults,
    )
    return run(config, clock=SteppingClock(), run_ids=deterministic_run_ids("2025-01-01T00:00:00Z"),
               handle_signals=False)


@pytest.fixture(scope="session")
def e2e_log(tmp_path_factory):
    outcome = scripted_run(tmp_path_factory.mktemp("e2e"))
    assert outcome.reason == "mission-complete", outcome.error
    return outcome.log_path


# ---------------------------------------------------------------------------
# in-process loopback SSH server (no sshd needed)


class _Server(paramiko.ServerInterface):
    def check_channel_request(self, kind, chanid):
        if kind == "session":
            return paramiko.OPEN_SUCCEEDED
        return paramiko.OPEN_FAILED_ADMINISTRATIVELY_PROHIBITED

    def get_allowed_auths(self, username):
        return "password"

    def check_auth_password(self, username, password):
        if username == SSH_USER and password == SSH_PASSWORD:
            return paramiko.AUTH_SUCCESSFUL
        return paramiko.AUTH_FAILED

    def check_channel_exec_request(self, channel, command):
        threading.Thread(target=_serve_exec, args=(channel, command.decode()), daemon=True).start()
        return True


def _pump(stream, send):
    for chunk in iter(lambda: stream.read1(65536), b""):
        try:
            send(chunk)
        except (OSError, EOFError):
            return


def _serve_exec(channel, command):
    proc = subprocess.Popen(["bash", "-c", command], stdin=subprocess.DEVNULL, stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, start_new_session=True)
    pumps = [threading.Thread(target=_pump, args=(proc.stdout, channel.sendall), daemon=True),
             threading.Thread(target=_pump, args=(proc.stderr, channel.sendall_stderr), daemon=True)]
    for t in pumps:
        t.start()
    while proc.poll() is None:
        if channel.closed or not channel.get_transport().is_active():
            os.killpg(proc.pid, 9)
            proc.wait()
            return
        threading.Event().wait(0.02)
    for t in pumps:
        t.join(timeout=1)
    try:
        channel.send_exit_status(proc.returncode)
        channel.close()
    except (OSError, EOFError):
        pass


class LoopbackSSH:
    def __init__(self):
        self.host_key = paramiko.RSAKey.generate(2048)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(8)
        self.port = self.sock.getsockname()[1]
        self.transports = []
        self._stop = False
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while not self._stop:
            try:
                client, _ = self.sock.accept()
            except OSError:
                return
            transport = paramiko.Transport(client)
            transport.add_server_key(self.host_key)
            transport.start_server(server=_Server())
            self.transports.append(transport)

    def drop_connections(self):
        for t in self.transports:
            t.close()

    def close(self):
        self._stop = True
        self.sock.close()
        self.drop_connections()


@pytest.fixture(scope="session")
def ssh_server():
    server = LoopbackSSH()
    yield server
    server.close()
