"""Unified chat-completion gateway.

Every model call in the pipeline flows through :class:`Gateway`, which adds
rate limiting, bounded retry with exponential backoff, and content-addressed
response caching in front of a pluggable backend. The scripted
:class:`MockBackend` makes whole pipeline runs deterministic and free of
network access; :class:`HttpBackend` talks to a real chat-completion endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import httpx

from .fsutil import DIGEST_ALGORITHM, atomic_write_text, canonical_json, sha256_text

logger = logging.getLogger(__name__)

API_KEY_ENV = "KBFORGE_API_KEY"
RATE_WINDOW_SECONDS = 60.0


class GatewayError(Exception):
    pass


class BackendError(GatewayError):
    pass


class TransientBackendError(BackendError):
    """Retryable: timeouts, throttling, 5xx responses, scripted failures."""


class PermanentBackendError(BackendError):
    """Not retryable: bad request, auth failure, missing mock rule."""


class MockRuleMissingError(PermanentBackendError):
    def __init__(self, prompt: str):
        super().__init__(f"no mock rule matches prompt: {prompt[:80]!r}")
        self.prompt_head = prompt[:80]


class RetryExhaustedError(GatewayError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    user_text: str
    system_text: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature out of range [0, 1]: {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_chars: int
    response_chars: int
    backend: str
    cache_hit: bool
    latency_ms: float


@dataclass(frozen=True)
class GatewayConfig:
    requests_per_minute: int = 60
    max_retries: int = 2
    backoff_base_ms: int = 200
    cache_dir: str | Path | None = None

    def __post_init__(self):
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be at least 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.backoff_base_ms < 0:
            raise ValueError("backoff_base_ms must be non-negative")


def cache_key(request: ChatRequest) -> str:
    """Stable digest over every request field that affects the response."""
    payload = canonical_json(
        {
            "model_id": request.model_id,
            "system_text": request.system_text,
            "user_text": request.user_text,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
        }
    )
    return sha256_text(payload)


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SlidingWindowLimiter:
    """Caps backend call initiations to ``capacity`` per sliding window.

    Each consumed slot frees up exactly one window-length after it was taken,
    so no window of ``period`` seconds ever contains more than ``capacity``
    initiations, burst included.
    """

    def __init__(self, capacity: int, clock, period: float = RATE_WINDOW_SECONDS):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self._capacity = capacity
        self._period = period
        self._clock = clock
        self._times: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; returns the initiation timestamp."""
        while True:
            with self._lock:
                now = self._clock.now()
                while self._times and self._times[0] <= now - self._period:
                    self._times.popleft()
                if len(self._times) < self._capacity:
                    self._times.append(now)
                    return now
                wait = self._times[0] + self._period - now
            self._clock.sleep(max(wait, 0.001))


class _MockRule:
    __slots__ = ("pattern", "response", "failures_remaining")

    def __init__(self, pattern: str, response: str, failures_before_success: int):
        self.pattern = pattern
        self.response = response
        self.failures_remaining = failures_before_success


class MockBackend:
    """Deterministic scripted backend for offline runs and tests.

    Rules are matched against the prompt text in registration order; the
    first rule whose pattern occurs as a substring wins. A rule registered
    with ``failures_before_success=n`` raises a retryable error for its first
    ``n`` matches, then answers normally.
    """

    name = "mock"

    def __init__(self):
        self._rules: list[_MockRule] = []
        self._lock = threading.Lock()
        self.calls: list[str] = []

    def register_rule(self, pattern: str, response: str, failures_before_success: int = 0) -> int:
        if not pattern:
            raise ValueError("pattern must be non-empty")
        if failures_before_success < 0:
            raise ValueError("failures_before_success must be non-negative")
        with self._lock:
            self._rules.append(_MockRule(pattern, response, failures_before_success))
            return len(self._rules) - 1

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def send(self, request: ChatRequest) -> str:
        prompt = request.user_text
        with self._lock:
            self.calls.append(prompt)
            for rule in self._rules:
                if rule.pattern in prompt:
                    if rule.failures_remaining > 0:
                        rule.failures_remaining -= 1
                        raise TransientBackendError(
                            f"scripted failure for pattern {rule.pattern[:40]!r}"
                        )
                    return rule.response
        raise MockRuleMissingError(prompt)


class HttpBackend:
    """Generic chat-completion endpoint speaking the common JSON shape."""

    name = "http"

    def __init__(
        self,
        endpoint_url: str,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint_url:
            raise ValueError("endpoint_url must be non-empty")
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise PermanentBackendError(
                f"no API key: set {API_KEY_ENV} or pass api_key explicitly"
            )
        self._endpoint = endpoint_url
        self._headers = {"Authorization": f"Bearer {key}"}
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def send(self, request: ChatRequest) -> str:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        payload = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            response = self._client.post(self._endpoint, json=payload, headers=self._headers)
        except httpx.TimeoutException as exc:
            raise TransientBackendError(f"request timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"status {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise PermanentBackendError(f"status {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
            return body["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise PermanentBackendError(f"malformed completion payload: {exc}") from exc


class Gateway:
    """Rate limited, cached, retrying front door for one backend."""

    def __init__(self, backend, config: GatewayConfig = GatewayConfig(), clock=None):
        self.backend = backend
        self.config = config
        self.clock = clock if clock is not None else SystemClock()
        self._limiter = SlidingWindowLimiter(config.requests_per_minute, self.clock)
        self._cache_dir = Path(config.cache_dir) if config.cache_dir else None
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []
        self.backend_calls = 0

    def _cache_paths(self, digest: str) -> tuple[Path, Path]:
        return self._cache_dir / f"{digest}.txt", self._cache_dir / f"{digest}.json"

    def _cache_get(self, digest: str) -> str | None:
        if self._cache_dir is None:
            return None
        text_path, _ = self._cache_paths(digest)
        try:
            return text_path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def _cache_put(self, digest: str, request: ChatRequest, text: str) -> None:
        if self._cache_dir is None:
            return
        text_path, meta_path = self._cache_paths(digest)
        atomic_write_text(text_path, text)
        meta = {
            "digest_algorithm": DIGEST_ALGORITHM,
            "model_id": request.model_id,
            "backend": self.backend.name,
            "prompt_chars": _prompt_chars(request),
            "response_chars": len(text),
        }
        atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
        digest = cache_key(request)
        cached = self._cache_get(digest)
        if cached is not None:
            return ChatResponse(
                text=cached,
                prompt_chars=_prompt_chars(request),
                response_chars=len(cached),
                backend=self.backend.name,
                cache_hit=True,
                latency_ms=0.0,
            )

        attempts = self.config.max_retries + 1
        last_error: TransientBackendError | None = None
        for attempt in range(attempts):
            if attempt:
                backoff_s = self.config.backoff_base_ms * (2 ** (attempt - 1)) / 1000.0
                if backoff_s:
                    self.clock.sleep(backoff_s)
            self._limiter.acquire()
            with self._lock:
                self.backend_calls += 1
            started = self.clock.now()
            try:
                text = self.backend.send(request)
            except TransientBackendError as exc:
                last_error = exc
                logger.warning("backend attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                continue
            self._cache_put(digest, request, text)
            return ChatResponse(
                text=text,
                prompt_chars=_prompt_chars(request),
                response_chars=len(text),
                backend=self.backend.name,
                cache_hit=False,
                latency_ms=(self.clock.now() - started) * 1000.0,
            )
        raise RetryExhaustedError(
            f"backend failed after {attempts} attempt(s): {last_error}"
        ) from last_error


def _prompt_chars(request: ChatRequest) -> int:
    return len(request.user_text) + len(request.system_text or "")
