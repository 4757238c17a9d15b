"""
LLM Backends
Pluggable large-LM clients for rationale distillation plus a disk response cache.

Backends:
    mock   - deterministic offline stand-in, always parseable
    http   - POST {"prompt", "max_tokens"} -> {"text"} with a bearer token
    openai - any OpenAI-compatible chat endpoint (e.g. a self-hosted Llama-2)
"""

import hashlib
import os
import re
import tempfile
import threading
import time
from pathlib import Path
from typing import List, Optional, Protocol

import httpx
import openai
import orjson
import structlog

from ..config import API_KEY_ENV, BackendConfig, get_api_key
from ..exceptions import ConfigError, DistillError

logger = structlog.get_logger()

# Review slot inside the distillation template: said '{review}'. Use two ...
_REVIEW_SLOT = re.compile(r"said '(.*)'\. Use two sentences", re.DOTALL)

_WORD = re.compile(r"[^\W_]+(?:'[^\W_]+)?")

STOPWORDS = frozenset(
    """
    a about after all also am an and any are as at be been but by can could did do does
    for from had has have he her him his how i if in into is it its just me more most my
    no not of on or our out over she so some than that the their them then there these
    they this to too up us very was we were what when which who will with would you your
    """.split()
)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class LLMBackend(Protocol):
    """Anything that turns a rendered prompt into response text"""

    calls: int

    def complete(self, prompt: str) -> str:
        ...


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def extract_review(prompt: str) -> str:
    match = _REVIEW_SLOT.search(prompt)
    return match.group(1) if match else prompt


def content_words(text: str) -> List[str]:
    """Lowercased words of the text minus stopwords, first-occurrence order"""
    seen = []
    for word in _WORD.findall(text.lower()):
        if word not in STOPWORDS and word not in seen:
            seen.append(word)
    return seen


def select_words(review: str, count: int = 3) -> List[str]:
    """
    Stable hash selection of review words

    Words are ranked by sha256(review + NUL + word); the top `count` are kept
    (cycling when the review has fewer distinct words). Reviews made only of
    stopwords fall back to all their words.
    """
    words = content_words(review)
    if not words:
        words = []
        for word in _WORD.findall(review.lower()):
            if word not in words:
                words.append(word)
    if not words:
        words = ["unspecified"]
    ranked = sorted(words, key=lambda w: hashlib.sha256(f"{review}\0{w}".encode("utf-8")).hexdigest())
    return [ranked[i % len(ranked)] for i in range(count)]


def mock_backend(prompt: str) -> str:
    """Deterministic response built only from words of the embedded review"""
    w1, w2, w3 = select_words(extract_review(prompt), 3)
    return f"The user prefers items featuring {w1} and {w2}. The item's attributes include {w3} qualities."


class MockBackend:
    """Offline backend with a call counter (used to verify cache hits)"""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        return mock_backend(prompt)


class CannedBackend:
    """Replays fixed responses keyed by prompt; missing prompts raise"""

    def __init__(self, responses):
        self.responses = dict(responses)
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        if prompt not in self.responses:
            raise DistillError("no canned response for prompt", code="BACKEND_FAILED")
        return self.responses[prompt]


def _backoff(attempt: int) -> float:
    return min(1.0 * (2 ** attempt), 30.0)


class HttpBackend:
    """
    Plain JSON-over-HTTP backend

    Retries transport errors and 429/5xx responses with exponential backoff;
    other 4xx responses fail immediately.
    """

    def __init__(self, cfg: BackendConfig, api_key: str, client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()
        self.client = client or httpx.Client(
            timeout=cfg.timeout,
            headers={"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"},
        )
        self.sleep = time.sleep

    def complete(self, prompt: str) -> str:
        payload = {"prompt": prompt, "max_tokens": self.cfg.max_tokens}
        last_error: Optional[Exception] = None
        for attempt in range(self.cfg.max_retries + 1):
            with self._lock:
                self.calls += 1
            try:
                response = self.client.post(self.cfg.endpoint, content=orjson.dumps(payload))
                if response.status_code in RETRYABLE_STATUS:
                    raise httpx.HTTPStatusError(
                        f"retryable status {response.status_code}", request=response.request, response=response
                    )
                response.raise_for_status()
                text = orjson.loads(response.content).get("text")
                if not isinstance(text, str):
                    raise DistillError("backend response has no 'text' string", code="BACKEND_FAILED")
                return text
            except httpx.HTTPStatusError as e:
                if e.response.status_code not in RETRYABLE_STATUS:
                    raise DistillError(f"backend rejected request: {e.response.status_code}", code="BACKEND_FAILED")
                last_error = e
            except (httpx.TransportError, orjson.JSONDecodeError) as e:
                last_error = e
            if attempt < self.cfg.max_retries:
                wait = _backoff(attempt)
                logger.warning("Backend call failed, retrying", attempt=attempt + 1, wait=wait, error=str(last_error))
                self.sleep(wait)
        raise DistillError(f"backend unreachable after {self.cfg.max_retries + 1} attempts: {last_error}",
                           code="BACKEND_FAILED")


class OpenAIBackend:
    """Chat-completions backend for OpenAI-compatible servers"""

    def __init__(self, cfg: BackendConfig, api_key: str, client: Optional[openai.OpenAI] = None):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()
        self.client = client or openai.OpenAI(
            api_key=api_key,
            base_url=cfg.endpoint,
            timeout=cfg.timeout,
            max_retries=0,
        )
        self.sleep = time.sleep

    def complete(self, prompt: str) -> str:
        last_error: Optional[Exception] = None
        for attempt in range(self.cfg.max_retries + 1):
            with self._lock:
                self.calls += 1
            try:
                response = self.client.chat.completions.create(
                    model=self.cfg.model,
                    messages=[{"role": "user", "content": prompt}],
                    temperature=self.cfg.temperature,
                    max_tokens=self.cfg.max_tokens,
                )
                return response.choices[0].message.content or ""
            except (openai.RateLimitError, openai.APITimeoutError, openai.APIConnectionError) as e:
                last_error = e
            except openai.APIStatusError as e:
                if e.status_code not in RETRYABLE_STATUS:
                    raise DistillError(f"backend rejected request: {e.status_code}", code="BACKEND_FAILED")
                last_error = e
            if attempt < self.cfg.max_retries:
                wait = _backoff(attempt)
                logger.warning("Backend call failed, retrying", attempt=attempt + 1, wait=wait, error=str(last_error))
                self.sleep(wait)
        raise DistillError(f"backend unreachable after {self.cfg.max_retries + 1} attempts: {last_error}",
                           code="BACKEND_FAILED")


def make_backend(cfg: BackendConfig) -> LLMBackend:
    if cfg.kind == "mock":
        return MockBackend()
    api_key = get_api_key()
    if not api_key:
        raise ConfigError(f"distill.kind={cfg.kind} needs the {API_KEY_ENV} environment variable")
    if cfg.kind == "http":
        return HttpBackend(cfg, api_key)
    return OpenAIBackend(cfg, api_key)


class ResponseCache:
    """
    Disk cache of backend responses

    One JSON file per prompt hash, sharded by the first two hex digits.
    Writes go through a temp file and os.replace, so concurrent writers of
    distinct keys never see partial files.
    """

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _get_disk_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def get(self, prompt: str) -> Optional[str]:
        path = self._get_disk_path(prompt_key(prompt))
        try:
            payload = orjson.loads(path.read_bytes())
        except FileNotFoundError:
            payload = None
        except (OSError, orjson.JSONDecodeError) as e:
            logger.warning("Unreadable cache entry ignored", path=str(path), error=str(e))
            payload = None
        with self._lock:
            if payload is None or payload.get("prompt") != prompt:
                self.misses += 1
                return None
            self.hits += 1
        return payload["text"]

    def put(self, prompt: str, text: str) -> None:
        path = self._get_disk_path(prompt_key(prompt))
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(orjson.dumps({"prompt": prompt, "text": text}))
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
