"""
Tests for the LLM backends and the response cache.
"""

import httpx
import openai
import orjson
import pytest

from rdrec.config import BackendConfig
from rdrec.exceptions import ConfigError, DistillError
from rdrec.services.distiller import build_prompt
from rdrec.services.llm_backend import (
    API_KEY_ENV,
    HttpBackend,
    MockBackend,
    OpenAIBackend,
    ResponseCache,
    extract_review,
    make_backend,
    mock_backend,
    select_words,
)

ENDPOINT = "http://localhost:8000/generate"


def create_http_backend(handler, max_retries=2):
    cfg = BackendConfig(kind="http", endpoint=ENDPOINT, max_retries=max_retries)
    backend = HttpBackend(cfg, "secret", client=httpx.Client(transport=httpx.MockTransport(handler)))
    waits = []
    backend.sleep = waits.append
    return backend, waits


def create_mock_openai_client(outcomes):
    """Mock OpenAI client; each outcome is response text or an exception to raise"""
    class MockOpenAI:
        class MockCompletion:
            def __init__(self, content):
                self.choices = [type("obj", (object,), {
                    "message": type("obj", (object,), {"content": content})()
                })()]

        class MockCompletions:
            def __init__(self):
                self.requests = []

            def create(self, **kwargs):
                self.requests.append(kwargs)
                outcome = outcomes.pop(0)
                if isinstance(outcome, Exception):
                    raise outcome
                return MockOpenAI.MockCompletion(outcome)

        def __init__(self):
            self.chat = type("obj", (object,), {"completions": self.MockCompletions()})()

    return MockOpenAI()


def test_mock_backend_uses_review_words_only():
    review = "Sturdy lantern, bright beam, great for camping trips"
    response = mock_backend(build_prompt(review).text)
    w1, w2, w3 = select_words(review)
    assert response == f"The user prefers items featuring {w1} and {w2}. The item's attributes include {w3} qualities."
    assert extract_review(build_prompt(review).text) == review


def test_select_words_is_stable_and_cycles():
    assert select_words("the red red hat") == select_words("the red red hat")
    assert sorted(set(select_words("red hat", 3))) == ["hat", "red"]
    assert select_words("the and of", 1)[0] in {"the", "and", "of"}
    assert select_words("", 2) == ["unspecified", "unspecified"]


def test_http_backend_posts_prompt():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"text": "ok"})

    backend, waits = create_http_backend(handler)
    assert backend.complete("hello") == "ok"
    assert orjson.loads(seen[0].content) == {"prompt": "hello", "max_tokens": 128}
    assert backend.calls == 1 and waits == []


def test_http_backend_retries_with_backoff():
    statuses = iter([503, 429, 200])

    def handler(request):
        status = next(statuses)
        return httpx.Response(status, json={"text": "done"} if status == 200 else {})

    backend, waits = create_http_backend(handler)
    assert backend.complete("p") == "done"
    assert waits == [1.0, 2.0]
    assert backend.calls == 3


def test_http_backend_gives_up():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    backend, waits = create_http_backend(handler, max_retries=1)
    with pytest.raises(DistillError) as e:
        backend.complete("p")
    assert e.value.code == "BACKEND_FAILED"
    assert backend.calls == 2 and waits == [1.0]


def test_http_client_errors_are_not_retried():
    backend, waits = create_http_backend(lambda request: httpx.Response(401))
    with pytest.raises(DistillError):
        backend.complete("p")
    assert backend.calls == 1 and waits == []


def test_http_response_without_text():
    backend, _ = create_http_backend(lambda request: httpx.Response(200, json={"output": "x"}))
    with pytest.raises(DistillError):
        backend.complete("p")


def test_openai_backend_sends_chat_request():
    client = create_mock_openai_client(["The user prefers tea. The item's attributes include mint."])
    backend = OpenAIBackend(BackendConfig(kind="openai"), "secret", client=client)
    assert backend.complete("prompt").startswith("The user prefers tea")
    request = client.chat.completions.requests[0]
    assert request["messages"] == [{"role": "user", "content": "prompt"}]
    assert request["temperature"] == 0.0


def test_openai_backend_retries_connection_errors():
    failure = openai.APIConnectionError(request=httpx.Request("POST", ENDPOINT))
    client = create_mock_openai_client([failure, "answer"])
    backend = OpenAIBackend(BackendConfig(kind="openai", max_retries=1), "secret", client=client)
    waits = []
    backend.sleep = waits.append
    assert backend.complete("p") == "answer"
    assert waits == [1.0]


def test_make_backend_needs_a_key(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    assert isinstance(make_backend(BackendConfig()), MockBackend)
    with pytest.raises(ConfigError):
        make_backend(BackendConfig(kind="http", endpoint=ENDPOINT))
    monkeypatch.setenv(API_KEY_ENV, "secret")
    assert isinstance(make_backend(BackendConfig(kind="http", endpoint=ENDPOINT)), HttpBackend)


def test_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path)
    assert cache.get("prompt") is None
    cache.put("prompt", "response")
    assert cache.get("prompt") == "response"
    assert (cache.hits, cache.misses) == (1, 1)
    assert not list(tmp_path.rglob("*.tmp"))


def test_corrupt_cache_entry_is_a_miss(tmp_path):
    cache = ResponseCache(tmp_path)
    cache.put("prompt", "response")
    next(tmp_path.rglob("*.json")).write_bytes(b"{not json")
    assert cache.get("prompt") is None
