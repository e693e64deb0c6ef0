"""Completion backends.

All backends expose ``complete(request) -> CompletionResponse``:

- ``HttpProvider`` talks to an OpenAI-compatible ``/v1/chat/completions``.
- ``ScriptedProvider`` returns canned responses (tests only).
- ``ReplayProvider`` answers from a cassette and fails on a miss.
- ``RecordingProvider`` wraps a live backend and writes every new exchange
  into a cassette.
"""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from collections import deque
from typing import Callable, Iterable, Protocol, Union

import httpx

from .cassette import Cassette, canonical_key
from .types import (
    CassetteMiss,
    CompletionRequest,
    CompletionResponse,
    ProviderError,
    TransportError,
)

log = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://api.openai.com"
API_KEY_ENV = "PARLD_API_KEY"
API_BASE_ENV = "PARLD_API_BASE"


class Provider(Protocol):
    name: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def template_of(request: CompletionRequest) -> str:
    """Template id carried in a request tag (``"analyzer@1"`` -> ``"analyzer"``)."""
    return request.tag.split("@", 1)[0]


ScriptItem = Union[str, Callable[[CompletionRequest], str]]


class ScriptedProvider:
    """Returns queued responses in order, then falls back to ``handler``.

    Every request is kept in ``requests`` so tests can count calls.
    """

    name = "scripted"

    def __init__(
        self,
        responses: Iterable[ScriptItem] = (),
        handler: Callable[[CompletionRequest], str] | None = None,
    ) -> None:
        self._queue: deque[ScriptItem] = deque(responses)
        self._handler = handler
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        self.requests.append(request)
        if self._queue:
            item = self._queue.popleft()
            content = item(request) if callable(item) else item
        elif self._handler is not None:
            content = self._handler(request)
        else:
            raise ProviderError(f"scripted provider exhausted at call {len(self.requests)}")
        return CompletionResponse(content=content, provider="scripted")

    @property
    def call_tags(self) -> list[str]:
        return [template_of(r) for r in self.requests]


class ReplayProvider:
    name = "replay"

    def __init__(self, cassette: Cassette) -> None:
        self.cassette = cassette

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        response = self.cassette.lookup(request)
        if response is None:
            raise CassetteMiss(canonical_key(request))
        return response


class RecordingProvider:
    """Live backend that records new exchanges and reuses recorded ones.

    Reuse keeps recording consistent with replay: an identical request issued
    twice in one run gets the same answer both times.
    """

    def __init__(self, inner: Provider, cassette: Cassette) -> None:
        self.inner = inner
        self.cassette = cassette
        self.name = inner.name
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        cached = self.cassette.lookup(request)
        if cached is not None:
            return cached
        response = self.inner.complete(request)
        with self._lock:
            if self.cassette.lookup(request) is None:
                self.cassette.record(request, response)
        return response


class TokenBucket:
    """Blocking rate limiter: ``rate_per_minute`` tokens, refilled continuously."""

    def __init__(self, rate_per_minute: float, clock: Callable[[], float] = time.monotonic) -> None:
        self.capacity = max(1.0, float(rate_per_minute))
        self.rate = float(rate_per_minute) / 60.0
        self.tokens = self.capacity
        self._clock = clock
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self, sleep: Callable[[float], None] = time.sleep) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            sleep(wait)


_RETRY_STATUS = {408, 409, 429}


class HttpProvider:
    name = "http"

    def __init__(
        self,
        api_key: str | None = None,
        base_url: str | None = None,
        *,
        max_retries: int = 5,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        timeout: float = 120.0,
        requests_per_minute: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.api_key:
            raise ProviderError(f"missing API key: set {API_KEY_ENV}")
        base = base_url or os.environ.get(API_BASE_ENV) or DEFAULT_API_BASE
        self.endpoint = base.rstrip("/") + "/v1/chat/completions"
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._bucket = TokenBucket(requests_per_minute) if requests_per_minute > 0 else None
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    @staticmethod
    def payload(request: CompletionRequest) -> dict:
        body: dict = {
            "model": request.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        if request.json_mode:
            body["response_format"] = {"type": "json_object"}
        return body

    def _backoff(self, attempt: int) -> float:
        delay = min(self.backoff_cap, self.backoff_base * (2**attempt))
        return delay * (0.5 + random.random() / 2)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        body = self.payload(request)
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if self._bucket is not None:
                self._bucket.acquire(self._sleep)
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = exc
            else:
                if resp.status_code == 200:
                    return self._parse(resp)
                if resp.status_code in _RETRY_STATUS or resp.status_code >= 500:
                    last_error = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            if attempt < self.max_retries:
                delay = self._backoff(attempt)
                log.warning("completion attempt %d failed (%s); retrying in %.1fs", attempt + 1, last_error, delay)
                self._sleep(delay)
        raise TransportError(f"request failed after {self.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _parse(resp: httpx.Response) -> CompletionResponse:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return CompletionResponse(
            content=content,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            provider="http",
        )
