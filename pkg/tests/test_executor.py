import pytest

from cochise.agent import LimitStop
from cochise.channel import CommandResult, LocalChannel, MockChannel
from cochise.executor import (
    Command,
    Complete,
    Executor,
    GiveUp,
    parse_action,
    truncate_observation,
)
from cochise.planner import ParseFailure, TaskAssignment
from cochise.testbed import load_fixture

from conftest import MINI_GOAD
from helpers import Harness, bash

TASK = TaskAssignment("1", "scan the network", "subnet 192.168.56.0/24")


def test_parse_action_variants():
    assert parse_action("```bash\nls -la\n```") == Command("ls -la")
    assert parse_action("```sh\na\n```\n```bash\nb\n```") == Command("a", 1)
    assert parse_action("```python\nprint()\n```\nTASK COMPLETE: done") == Complete("done")
    assert parse_action("GIVING UP: no route") == GiveUp("no route")
    with pytest.raises(ParseFailure, match="no action found"):
        parse_action("I think we should scan.")
    with pytest.raises(ParseFailure, match="empty command block"):
        parse_action("```bash\n\n```")


def test_truncate_observation_budget_and_status():
    long = "".join(f"{i:05d}\n" for i in range(10000))
    text = truncate_observation(CommandResult(long, "", 0, 12), 1200)
    assert text.startswith("STDOUT:\n00000")
    assert "characters elided" in text
    assert text.rstrip().endswith("[exit code 0, 12 ms]")
    assert "09999" in text
    assert truncate_observation(CommandResult("", "", None, 1000, True)).startswith("[timed out")


def mock_channel():
    return MockChannel(load_fixture(MINI_GOAD))


def test_episode_success(tmp_path):
    h = Harness(tmp_path, [bash("nmap -sV 192.168.56.0/24"),
                           "FINDING: two hosts\nTASK COMPLETE: scanned"])
    summary = Executor(h.caller, h.knowledge, "m").run_episode(TASK, mock_channel())
    assert (summary.status, summary.summary, summary.rounds_used) == ("success", "scanned", 2)
    keys = [e.event for e in h.events()][1:]
    assert keys == ["task.start", "executor.step", "cmd.execute", "executor.step", "knowledge.finding", "task.end"]
    step2 = h.events("executor.step")[1]
    assert "STDOUT:" in step2.payload["prompt"][-1]["content"]
    assert step2.payload["task_id"] == "1" and step2.payload["step"] == 2


def test_episode_give_up(tmp_path):
    h = Harness(tmp_path, ["GIVING UP: firewall everywhere"])
    summary = Executor(h.caller, h.knowledge, "m").run_episode(TASK, mock_channel())
    assert summary.status == "failure" and summary.summary == "firewall everywhere"


def test_round_limit_then_summarize(tmp_path):
    h = Harness(tmp_path, [bash("whoami")] * 3 + ["ran out of rounds"])
    summary = Executor(h.caller, h.knowledge, "m", max_rounds=3).run_episode(TASK, mock_channel())
    assert summary.status == "rounds-exhausted" and summary.rounds_used == 3
    assert len(h.events("executor.step")) == 3
    assert len(h.events("executor.summarize")) == 1


def test_invalid_invocation_triggers_repair(tmp_path):
    h = Harness(tmp_path, [
        bash("impacket-psexec --target 192.168.56.22"),
        bash("impacket-psexec north/samwell.tarly:Heartsbane@192.168.56.22 whoami"),
        "TASK COMPLETE: ok",
    ])
    Executor(h.caller, h.knowledge, "m").run_episode(TASK, mock_channel())
    (repair,) = h.events("reflexion.repair")
    assert repair.payload["trigger"] == "invalid-invocation"
    assert "usage:" in repair.payload["prompt"][-1]["content"]
    assert len(h.events("cmd.execute")) == 2


def test_parse_failure_repairs_are_bounded(tmp_path):
    h = Harness(tmp_path, ["hmm", "still prose", "nope", "TASK COMPLETE: fine"])
    summary = Executor(h.caller, h.knowledge, "m").run_episode(TASK, mock_channel())
    repairs = h.events("reflexion.repair")
    assert [r.payload["attempt"] for r in repairs] == [1, 2]
    assert summary.status == "success" and summary.rounds_used == 2


def test_limit_stop_ends_task_with_failure(tmp_path):
    calls = []

    def check():
        calls.append(1)
        if len(calls) > 1:
            raise LimitStop("budget-exceeded")

    h = Harness(tmp_path, [bash("whoami"), bash("whoami")])
    with pytest.raises(LimitStop):
        Executor(h.caller, h.knowledge, "m", check_limits=check).run_episode(TASK, mock_channel())
    (end,) = h.events("task.end")
    assert end.payload["status"] == "failure" and "budget-exceeded" in end.payload["summary"]


def test_executor_prompt_has_no_history_from_other_tasks(tmp_path):
    h = Harness(tmp_path, ["TASK COMPLETE: secret-token-abc", "TASK COMPLETE: second"])
    ex = Executor(h.caller, h.knowledge, "m")
    ex.run_episode(TASK, mock_channel())
    ex.run_episode(TaskAssignment("2", "other"), mock_channel())
    second = h.events("executor.step")[1]
    assert "secret-token-abc" not in str(second.payload["prompt"])


def test_extra_blocks_are_noted(tmp_path):
    h = Harness(tmp_path, ["```bash\necho a\n```\n```bash\necho b\n```", "TASK COMPLETE: x"])
    with LocalChannel() as ch:
        Executor(h.caller, h.knowledge, "m").run_episode(TASK, ch)
    (cmd,) = h.events("cmd.execute")
    assert cmd.payload["cmd"] == "echo a"
    observation = h.events("executor.step")[1].payload["prompt"][-1]["content"]
    assert "2" in observation and "only the first" in observation.lower()
