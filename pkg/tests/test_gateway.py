import json
import threading
import time

import httpx
import numpy as np
import pytest

from kgcot.llm import (
    ChatGateway,
    ChatRequest,
    ChatRule,
    CredentialError,
    EmbedGateway,
    OpenAIChatProvider,
    OpenAIEmbedder,
    ProviderConfig,
    ProviderError,
    RateLimiter,
    ResponseCache,
    ScriptError,
    ScriptedChatProvider,
    ScriptedEmbedder,
    TransientProviderError,
    TransportError,
    make_chat_provider,
)

from conftest import CountingChat, RULES


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


class Flaky:
    """Fails with ``exc`` for the first ``failures`` calls, then replies ``ok``."""

    provider_id, model_id = "flaky", "v1"

    def __init__(self, failures, exc=TransientProviderError("HTTP 503")):
        self.failures = failures
        self.exc = exc
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.exc
        return "ok"


def test_scripted_rule_match():
    provider = ScriptedChatProvider([ChatRule("1,3", "prune", ("PRUNE",))])
    gw = ChatGateway(provider)
    assert gw.chat(ChatRequest("prune", "please PRUNE these")) == "1,3"
    with pytest.raises(ScriptError):
        gw.chat(ChatRequest("prune", "no marker"))
    with pytest.raises(ScriptError):
        gw.chat(ChatRequest("generate", "PRUNE"))


def test_unknown_template_id():
    with pytest.raises(ValueError):
        ChatRequest("summarise", "x")


def test_cache_hit_skips_provider():
    counting = CountingChat(ScriptedChatProvider([], default="d"))
    gw = ChatGateway(counting)
    r = ChatRequest("generate", "p")
    assert gw.chat(r) == gw.chat(r) == "d"
    assert len(counting.requests) == 1
    assert gw.stats.provider_calls == 1 and gw.stats.cache_hits == 1
    # a different temperature is a different key
    gw.chat(ChatRequest("generate", "p", temperature=0.7))
    assert len(counting.requests) == 2


def test_disk_cache_survives_new_gateway(tmp_path):
    counting = CountingChat(ScriptedChatProvider([], default="d"))
    ChatGateway(counting, cache=ResponseCache(tmp_path)).chat(ChatRequest("eval", "p"))
    gw = ChatGateway(counting, cache=ResponseCache(tmp_path))
    assert gw.chat(ChatRequest("eval", "p")) == "d"
    assert len(counting.requests) == 1 and gw.stats.provider_calls == 0
    assert list(tmp_path.glob("chat/*/*.bin"))


def test_retry_then_succeed():
    clock = FakeClock()
    flaky = Flaky(2)
    gw = ChatGateway(flaky, ProviderConfig(max_retries=3, backoff_base=0.5), clock=clock, sleep=clock.sleep)
    assert gw.chat(ChatRequest("eval", "x")) == "ok"
    assert flaky.calls == 3 and gw.stats.retries == 2
    assert clock.sleeps == [0.5, 1.0]
    assert len(gw.stats.attempt_log) == 2


def test_retries_exhausted_raise_transport_error():
    clock = FakeClock()
    flaky = Flaky(10)
    gw = ChatGateway(flaky, ProviderConfig(max_retries=2, backoff_base=1.0), clock=clock, sleep=clock.sleep)
    with pytest.raises(TransportError) as err:
        gw.chat(ChatRequest("eval", "x"))
    assert flaky.calls == 3 and len(err.value.attempts) == 3
    assert clock.sleeps == [1.0, 2.0]
    # nothing cached on failure
    flaky.failures = 0
    assert gw.chat(ChatRequest("eval", "x")) == "ok"


def test_credential_error_not_retried():
    flaky = Flaky(5, CredentialError("bad key"))
    gw = ChatGateway(flaky, ProviderConfig(max_retries=3), sleep=lambda s: None)
    with pytest.raises(CredentialError):
        gw.chat(ChatRequest("eval", "x"))
    assert flaky.calls == 1 and gw.stats.retries == 0


def test_permanent_provider_error_not_retried():
    flaky = Flaky(5, ProviderError("HTTP 400"))
    gw = ChatGateway(flaky, ProviderConfig(max_retries=3), sleep=lambda s: None)
    with pytest.raises(ProviderError):
        gw.chat(ChatRequest("eval", "x"))
    assert flaky.calls == 1


def test_rate_limiter_window():
    clock = FakeClock()
    lim = RateLimiter(3, clock=clock, sleep=clock.sleep)
    for _ in range(3):
        lim.acquire()
    assert clock.now == 0.0
    lim.acquire()
    assert clock.now == pytest.approx(60.0)
    # over any 60 s window at most 3 acquisitions
    stamps = [clock.now]
    for _ in range(7):
        lim.acquire()
        stamps.append(clock.now)
    all_stamps = [0.0, 0.0, 0.0] + stamps
    for t in all_stamps:
        assert sum(1 for s in all_stamps if t <= s < t + 60.0) <= 3


def test_gateway_rate_limit_with_fake_clock():
    clock = FakeClock()
    gw = ChatGateway(ScriptedChatProvider([], default="d"), ProviderConfig(rate_limit=2),
                     clock=clock, sleep=clock.sleep)
    for i in range(5):
        gw.chat(ChatRequest("eval", f"p{i}"))
    assert clock.now == pytest.approx(120.0)


def test_in_flight_limit_and_dedup():
    counting = CountingChat(ScriptedChatProvider([], default="d"), delay=0.02)
    gw = ChatGateway(counting, ProviderConfig(in_flight=3, rate_limit=10_000))
    prompts = [f"p{i % 10}" for i in range(40)]
    threads = [threading.Thread(target=gw.chat, args=(ChatRequest("eval", p),)) for p in prompts]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counting.peak <= 3 and gw.stats.max_in_flight <= 3
    assert len(counting.requests) == 10 == gw.stats.provider_calls


def test_embed_order_and_empty_batch():
    emb = ScriptedEmbedder(dimension=4)
    gw = EmbedGateway(emb, ProviderConfig(batch_size=2))
    texts = ["a", "b", "c", "a", "d"]
    out = gw.embed(texts)
    assert out.shape == (5, 4) and out.dtype == np.float32
    for row, t in zip(out, texts):
        assert np.array_equal(row, emb.vector(t).astype(np.float32))
    assert gw.stats.provider_calls == 2  # 4 unique texts, batches of 2
    with pytest.raises(ValueError):
        gw.embed([])


def test_embed_rejects_non_finite():
    class NaNs:
        provider_id, model_id = "nan", "v"

        def embed(self, texts):
            return [[float("nan"), 1.0] for _ in texts]

    with pytest.raises(ProviderError):
        EmbedGateway(NaNs()).embed(["x"])


def test_credential_from_environment(monkeypatch):
    cfg = ProviderConfig(credential_env="KGCOT_TEST_KEY")
    monkeypatch.delenv("KGCOT_TEST_KEY", raising=False)
    with pytest.raises(CredentialError):
        cfg.credential()
    monkeypatch.setenv("KGCOT_TEST_KEY", "sekrit")
    assert cfg.credential() == "sekrit"


def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_openai_chat_over_http(monkeypatch):
    monkeypatch.setenv("KGCOT_TEST_KEY", "tok")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "The answer is B"}}]})

    cfg = ProviderConfig(provider="openai", model="m1", endpoint="http://llm.local/v1", credential_env="KGCOT_TEST_KEY")
    gw = ChatGateway(OpenAIChatProvider(cfg, client=_mock_client(handler)), cfg)
    assert gw.chat(ChatRequest("eval", "hello")) == "The answer is B"
    assert seen["auth"] == "Bearer tok"
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["body"]["model"] == "m1" and seen["body"]["messages"][0]["content"] == "hello"


@pytest.mark.parametrize("status, exc", [(401, CredentialError), (403, CredentialError), (400, ProviderError)])
def test_openai_http_errors(status, exc):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status, text="nope")

    cfg = ProviderConfig(provider="openai", endpoint="http://llm.local")
    gw = ChatGateway(OpenAIChatProvider(cfg, client=_mock_client(handler)), cfg, sleep=lambda s: None)
    with pytest.raises(exc):
        gw.chat(ChatRequest("eval", "x"))
    assert len(calls) == 1


def test_openai_retries_on_429_then_succeeds():
    replies = iter([httpx.Response(429), httpx.Response(503),
                    httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})])
    cfg = ProviderConfig(provider="openai", endpoint="http://llm.local", max_retries=3)
    gw = ChatGateway(OpenAIChatProvider(cfg, client=_mock_client(lambda r: next(replies))), cfg,
                     sleep=lambda s: None)
    assert gw.chat(ChatRequest("eval", "x")) == "fine"
    assert gw.stats.retries == 2


def test_openai_timeout_is_transient():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    cfg = ProviderConfig(provider="openai", endpoint="http://llm.local", max_retries=1)
    gw = ChatGateway(OpenAIChatProvider(cfg, client=_mock_client(handler)), cfg, sleep=lambda s: None)
    with pytest.raises(TransportError) as err:
        gw.chat(ChatRequest("eval", "x"))
    assert len(err.value.attempts) == 2


def test_openai_embeddings_reordered_by_index():
    def handler(request):
        return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0.0, 1.0]},
                                                  {"index": 0, "embedding": [1.0, 0.0]}]})

    cfg = ProviderConfig(provider="openai", endpoint="http://llm.local")
    out = EmbedGateway(OpenAIEmbedder(cfg, client=_mock_client(handler)), cfg).embed(["a", "b"])
    assert out.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_make_chat_provider_from_rules():
    provider = make_chat_provider(ProviderConfig(options={"rules": str(RULES)}))
    assert isinstance(provider, ScriptedChatProvider)
    with pytest.raises(ProviderError):
        make_chat_provider(ProviderConfig())
    with pytest.raises(ProviderError):
        make_chat_provider(ProviderConfig(provider="mystery"))


def test_scripted_rules_version_checked():
    with pytest.raises(ScriptError):
        ScriptedChatProvider.from_file({"version": 2})


def test_alias_cosine_is_exact():
    emb = ScriptedEmbedder(8, aliases=[{"text": "near thing", "near": "thing", "cosine": 0.9}])
    a, b = emb.vector("near thing"), emb.vector("thing")
    c = a.dot(b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert c == pytest.approx(0.9, abs=1e-12)
    assert np.array_equal(emb.vector("  THING "), b)


def test_concurrent_identical_requests_one_call():
    counting = CountingChat(ScriptedChatProvider([], default="d"), delay=0.05)
    gw = ChatGateway(counting, ProviderConfig(in_flight=8))
    start = time.monotonic()
    threads = [threading.Thread(target=gw.chat, args=(ChatRequest("eval", "same"),)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(counting.requests) == 1 and gw.stats.cache_hits == 7
    assert time.monotonic() - start < 5
