import json
import threading
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np
import pytest

from conftest import write_json
from toolforge.backend import (
    BudgetExceeded,
    ChatRequest,
    EmbeddingFailure,
    Message,
    ProviderError,
    RateLimited,
    RemoteBackend,
    ScriptedBackend,
    Timeout,
    TokenBudget,
    load_fixtures,
)


def req(text="hi", agent="assistant", **kw):
    return ChatRequest((Message("system", "sys"), Message("user", text)), agent=agent, **kw)


# -- request invariants ----------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"messages": ()},
        {"messages": (Message("assistant", "x"),)},
        {"messages": (Message("user", "x"),), "temperature": 2.5},
        {"messages": (Message("user", "x"),), "max_tokens": 0},
        {"messages": (Message("user", "x"), Message("robot", "y"))},
    ],
)
def test_request_invariants(kwargs):
    with pytest.raises(ValueError):
        ChatRequest(**kwargs)


# -- scripted backend ------------------------------------------------------


def test_scripted_is_deterministic():
    a = ScriptedBackend(seed=3).chat(req())
    b = ScriptedBackend(seed=3).chat(req())
    assert a.text == b.text
    assert ScriptedBackend(seed=4).chat(req()).text != a.text


def test_fixture_lookup_for_user_simulator(tmp_path):
    path = tmp_path / "transcript.jsonl"
    rows = [
        {"agent": "user_simulator", "step": 0, "text": "I need a freight quote."},
        {"agent": "user_simulator", "step": 1, "text": "It weighs 500 kg."},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    backend = ScriptedBackend(fixtures=load_fixtures(path))
    first = backend.chat(req(agent="user_simulator"))
    second = backend.chat(
        ChatRequest(
            (Message("system", "s"), Message("user", "a"), Message("assistant", "b"), Message("user", "c")),
            agent="user_simulator",
        )
    )
    assert first.text == "I need a freight quote."
    assert second.text == "It weighs 500 kg."


def test_fixture_key_and_responder_fallback():
    backend = ScriptedBackend(
        fixtures={("judge", 0, "k1"): "pinned"},
        responders={"judge": lambda request, rng: f"dynamic {rng.random():.3f}"},
    )
    assert backend.chat(req(agent="judge", metadata={"fixture_key": "k1"})).text == "pinned"
    assert backend.chat(req(agent="judge", metadata={"fixture_key": "k2"})).text.startswith("dynamic")


def test_logprobs_only_when_requested():
    backend = ScriptedBackend()
    assert backend.chat(req()).logprobs is None
    resp = backend.chat(req(logprobs_requested=True))
    assert resp.logprobs and all(lp < 0 for lp in resp.logprobs)


def test_identical_texts_embed_identically():
    e1, e2 = ScriptedBackend().embed(["t", "t"])
    assert float(e1.as_array() @ e2.as_array()) == pytest.approx(1.0)


def test_embeddings_are_unit_norm():
    (e,) = ScriptedBackend().embed(["a"])
    assert abs(np.linalg.norm(e.as_array()) - 1) < 1e-6


def test_planted_near_duplicates():
    base = np.zeros(16)
    base[0] = 1.0
    near = base.copy()
    near[1] = 0.3
    backend = ScriptedBackend(embedding_overrides={"weather by city": base, "weather by coords": near}, embedding_dim=16)
    a, b, c = backend.embed(["weather by city", "weather by coords", "stock price"])
    oracle = float(base @ near / np.linalg.norm(near))
    assert float(a.as_array() @ b.as_array()) == pytest.approx(oracle)
    assert oracle > 0.9
    assert abs(float(a.as_array() @ c.as_array())) < 0.9


def test_empty_text_is_rejected():
    with pytest.raises(EmbeddingFailure):
        ScriptedBackend().embed(["ok", ""])


def test_budget_conservation_and_exhaustion():
    budget = TokenBudget(limit=40)
    backend = ScriptedBackend(budget=budget)
    seen = 0
    with pytest.raises(BudgetExceeded):
        for i in range(100):
            seen += backend.chat(req(f"message number {i}")).usage.total
    assert budget.total == seen
    assert sum(budget.by_agent().values()) == budget.total


# -- remote backend --------------------------------------------------------


def remote(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    sleeps = []
    backend = RemoteBackend("http://llm.test/v1", "m", client=client, sleep=sleeps.append, **kw)
    return backend, sleeps


def completion(text="ok", **extra):
    body = {"choices": [{"message": {"content": text}, "finish_reason": "stop"}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}}
    body.update(extra)
    return httpx.Response(200, json=body)


def test_remote_chat_wire_format():
    captured = {}

    def handler(request):
        captured["url"] = str(request.url)
        captured["body"] = json.loads(request.content)
        return completion("hello")

    backend, _ = remote(handler)
    resp = backend.chat(req(metadata={"secret": "not for the wire"}))
    assert resp.text == "hello" and resp.usage.total == 4
    assert captured["url"] == "http://llm.test/v1/chat/completions"
    assert captured["body"]["messages"][1] == {"role": "user", "content": "hi"}
    assert "secret" not in json.dumps(captured["body"])


def test_remote_retries_with_exponential_backoff():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503, text="busy")
        return completion()

    backend, sleeps = remote(handler, max_retries=3)
    assert backend.chat(req()).text == "ok"
    assert sleeps == [1.0, 2.0]
    assert [r.outcome for r in backend.request_log] == ["http_503", "http_503", "ok"]


def test_remote_rate_limit_exhausts_retries():
    backend, sleeps = remote(lambda r: httpx.Response(429), max_retries=2)
    with pytest.raises(RateLimited):
        backend.chat(req())
    assert len(backend.request_log) == 3
    assert sleeps == [1.0, 2.0]


def test_remote_client_errors_are_not_retried():
    backend, sleeps = remote(lambda r: httpx.Response(400, text="bad"), max_retries=3)
    with pytest.raises(ProviderError) as info:
        backend.chat(req())
    assert info.value.status == 400 and sleeps == []


def test_remote_timeout_after_retries():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    backend, sleeps = remote(handler, max_retries=2)
    with pytest.raises(Timeout):
        backend.chat(req())
    assert len(backend.request_log) == 3 and len(sleeps) == 2


def test_unreachable_host_times_out():
    backend = RemoteBackend("http://127.0.0.1:9", "m", max_retries=1, timeout=0.5, sleep=lambda s: None)
    with pytest.raises(Timeout):
        backend.chat(req())
    assert len(backend.request_log) == 2


def test_remote_bearer_token(monkeypatch):
    monkeypatch.setenv("TF_TEST_KEY", "sk-123")
    backend = RemoteBackend("http://x", "m", api_key_env="TF_TEST_KEY")
    assert backend._client.headers["Authorization"] == "Bearer sk-123"


def test_remote_logprobs_and_embeddings():
    def handler(request):
        body = json.loads(request.content)
        if request.url.path.endswith("embeddings"):
            data = [{"index": i, "embedding": [3.0, 4.0]} for i, _ in enumerate(body["input"])]
            return httpx.Response(200, json={"data": list(reversed(data)), "usage": {"prompt_tokens": 2}})
        assert body["logprobs"] is True
        return completion(choices=[{"message": {"content": "x"}, "logprobs": {"content": [{"logprob": -0.5}]}}])

    backend, _ = remote(handler)
    assert backend.chat(req(logprobs_requested=True)).logprobs == (-0.5,)
    vecs = backend.embed(["a", "b"])
    assert vecs[0].values == pytest.approx((0.6, 0.8))


def test_remote_parallelism_bound():
    active, peak = [0], [0]
    lock = threading.Lock()
    release = threading.Event()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        release.wait(0.05)
        with lock:
            active[0] -= 1
        return completion()

    backend, _ = remote(handler, parallelism=3)
    with ThreadPoolExecutor(10) as pool:
        list(pool.map(lambda _: backend.chat(req()), range(20)))
    assert peak[0] <= 3


def test_fixture_file_helper(tmp_path):
    p = write_json(tmp_path / "one.json", {"agent": "a", "text": "t"})
    assert load_fixtures(p) == {("a", 0, ""): "t"}
