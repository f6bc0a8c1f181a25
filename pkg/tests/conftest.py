import threading
import time
from importlib import resources
from pathlib import Path

import pytest

from kgcot.embed_index import build_index
from kgcot.graph_store import load_graph
from kgcot.llm import (
    ChatGateway,
    EmbedGateway,
    ProviderConfig,
    ResponseCache,
    ScriptedChatProvider,
    ScriptedEmbedder,
)
from kgcot.pipeline import Context, PipelineConfig, load_qa

FIXTURES = Path(str(resources.files("kgcot").joinpath("fixtures")))
GRAPH_CSV = FIXTURES / "graph.csv"
QA_JSONL = FIXTURES / "qa.jsonl"
RULES = FIXTURES / "rules.yaml"

# node ids in the fixture graph
DW, ATAXIA, BBG, MB, AOD, BRAIN = 0, 1, 2, 3, 4, 5


class CountingChat:
    """Wraps a chat provider; records prompts and peak concurrency."""

    provider_id = "counting"

    def __init__(self, inner, delay=0.0):
        self.inner = inner
        self.model_id = inner.model_id
        self.delay = delay
        self.requests = []
        self.active = 0
        self.peak = 0
        self._lock = threading.Lock()

    def complete(self, request):
        with self._lock:
            self.requests.append(request)
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            if self.delay:
                time.sleep(self.delay)
            return self.inner.complete(request)
        finally:
            with self._lock:
                self.active -= 1


class CountingEmbedder:
    provider_id = "counting"

    def __init__(self, inner):
        self.inner = inner
        self.model_id = inner.model_id
        self.calls = []

    def embed(self, texts):
        self.calls.append(list(texts))
        return self.inner.embed(texts)


@pytest.fixture
def graph():
    return load_graph(GRAPH_CSV)


@pytest.fixture
def scripted_chat():
    return ScriptedChatProvider.from_file(RULES)


@pytest.fixture
def scripted_embedder():
    return ScriptedEmbedder.from_file(RULES)


def make_ctx(graph, chat_provider=None, embed_provider=None, config=None, cache=None, in_flight=8):
    cache = cache if cache is not None else ResponseCache()
    embedder = EmbedGateway(embed_provider or ScriptedEmbedder.from_file(RULES),
                            ProviderConfig(in_flight=in_flight), cache=cache)
    chat = ChatGateway(chat_provider or ScriptedChatProvider.from_file(RULES),
                       ProviderConfig(in_flight=in_flight, rate_limit=100000), cache=cache)
    index = build_index(graph, embedder)
    return Context(graph, index, chat, embedder, config or PipelineConfig())


@pytest.fixture
def ctx(graph):
    return make_ctx(graph)


@pytest.fixture
def qa_pairs():
    return load_qa(QA_JSONL)


# criterion number -> (passed, summary); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, summary = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {summary}")
