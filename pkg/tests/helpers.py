from decimal import Decimal

from cochise.agent import LlmCaller
from cochise.knowledge import KnowledgeStore
from cochise.llm import Gateway, ModelPrice, PriceTable, ScriptedBackend
from cochise.log import SteppingClock, deterministic_run_ids, open_run, read_run

PRICES = PriceTable({"m": ModelPrice(Decimal(1), Decimal(2), Decimal(2), Decimal("0.5"))})


class Harness:
    """A log, knowledge store and scripted LLM wired together."""

    def __init__(self, tmp_path, responses):
        self.log = open_run(tmp_path, {}, SteppingClock(), run_ids=deterministic_run_ids(str(tmp_path)))
        self.backend = ScriptedBackend(responses)
        self.caller = LlmCaller(Gateway(self.backend, PRICES, sleep=lambda s: None), self.log)
        self.knowledge = KnowledgeStore(self.log)

    def events(self, key=None):
        self.log.close()
        events = read_run(self.log.path).events
        return [e for e in events if key is None or e.event == key]


def ptt_block(*lines):
    return "### PTT\n```markdown\n" + "\n".join(lines) + "\n```\n"


def bash(cmd, thought="next"):
    return f"{thought}\n```bash\n{cmd}\n```"
