import json
from pathlib import Path

import pytest

from eventmem.backends import StubEmbedder, StubExtractor
from eventmem.core import MemConfig
from eventmem.memory import EventGraphStore
from eventmem.pipeline import ingest
from eventmem.sentinel import read_frames

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def build_store(name, fixed_chunk=None, dim=256):
    d = FIXTURES / name
    store = EventGraphStore(MemConfig(embed_dim=dim))
    embed = StubEmbedder(dim)
    report = ingest(read_frames(d / "frames.jsonl"), (), store, StubExtractor.from_file(d / "replies.json"),
                    embed, fixed_chunk=fixed_chunk)
    return store, embed, report


def load_script(name):
    return json.loads((FIXTURES / name / "script.json").read_text())


@pytest.fixture
def cooking():
    return build_store("cooking")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    outcome = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = getattr(rep, "nodeid", "").rpartition("::")[2]
            if name in mod.CRITERIA and (rep.when == "call" or status != "passed"):
                outcome[name] = "PASS" if status == "passed" and outcome.get(name, "PASS") == "PASS" else "FAIL"
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for name, title in mod.CRITERIA.items():
        terminalreporter.write_line(f"{outcome.get(name, 'NOT RUN'):7} AC{title}")
