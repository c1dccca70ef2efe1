"""Rate limiting, caching, retries, and backend error classification."""

import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FakeClock
from kbforge.gateway import (
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayConfig,
    HttpBackend,
    MockBackend,
    MockRuleMissingError,
    PermanentBackendError,
    RetryExhaustedError,
    SlidingWindowLimiter,
    TransientBackendError,
    cache_key,
)


def req(text="hello", **kw):
    return ChatRequest(model_id="m1", user_text=text, **kw)


# ---------------------------------------------------------------------------
# request validation


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(model_id="", user_text="x"),
        dict(model_id="m", user_text=""),
        dict(model_id="m", user_text="x", temperature=1.5),
        dict(model_id="m", user_text="x", temperature=-0.1),
        dict(model_id="m", user_text="x", max_output_tokens=0),
    ],
)
def test_chat_request_rejects_bad_fields(kwargs):
    with pytest.raises(ValueError):
        ChatRequest(**kwargs)


def test_cache_key_covers_all_response_affecting_fields():
    base = req()
    assert cache_key(base) == cache_key(req())
    assert cache_key(base) != cache_key(req("other"))
    assert cache_key(base) != cache_key(req(system_text="sys"))
    assert cache_key(base) != cache_key(req(temperature=0.5))
    assert cache_key(base) != cache_key(req(max_output_tokens=2047))
    assert cache_key(base) != cache_key(ChatRequest(model_id="m2", user_text="hello"))


# ---------------------------------------------------------------------------
# rate limiter


class TestSlidingWindowLimiter:
    def test_capacity_validated(self, fake_clock):
        with pytest.raises(ValueError):
            SlidingWindowLimiter(0, fake_clock)

    def test_burst_fills_then_blocks_one_period(self, fake_clock):
        limiter = SlidingWindowLimiter(3, fake_clock, period=60.0)
        starts = [limiter.acquire() for _ in range(3)]
        assert starts == [0.0, 0.0, 0.0]
        # fourth call must wait until the first slot expires
        assert limiter.acquire() > 60.0 - 1e-9

    def test_slots_free_individually(self, fake_clock):
        limiter = SlidingWindowLimiter(2, fake_clock, period=10.0)
        limiter.acquire()  # t=0
        fake_clock.advance(4.0)
        limiter.acquire()  # t=4
        got = limiter.acquire()  # blocked until t=0 slot frees at t>10
        assert got > 10.0 - 1e-9
        assert got < 14.0

    @settings(max_examples=60, deadline=None)
    @given(
        capacity=st.integers(min_value=1, max_value=8),
        gaps=st.lists(st.floats(min_value=0.0, max_value=30.0), min_size=1, max_size=60),
    )
    def test_no_window_ever_exceeds_capacity(self, capacity, gaps):
        clock = FakeClock()
        limiter = SlidingWindowLimiter(capacity, clock, period=60.0)
        starts = []
        for gap in gaps:
            clock.advance(gap)
            starts.append(limiter.acquire())
        assert starts == sorted(starts)
        for i, t0 in enumerate(starts):
            inside = [t for t in starts[i:] if t < t0 + 60.0]
            assert len(inside) <= capacity


# ---------------------------------------------------------------------------
# mock backend


def test_mock_backend_first_match_wins():
    backend = MockBackend()
    backend.register_rule("needle in", "first")
    backend.register_rule("needle", "second")
    assert backend.send(req("a needle in a haystack")) == "first"
    assert backend.send(req("a needle alone")) == "second"
    assert backend.call_count == 2


def test_mock_backend_unmatched_prompt_raises():
    backend = MockBackend()
    backend.register_rule("x", "y")
    with pytest.raises(MockRuleMissingError) as exc:
        backend.send(req("nothing matches this"))
    assert "nothing matches" in str(exc.value)


def test_mock_backend_rejects_empty_pattern():
    with pytest.raises(ValueError):
        MockBackend().register_rule("", "y")


def test_mock_backend_scripted_failures_then_success():
    backend = MockBackend()
    backend.register_rule("flaky", "ok", failures_before_success=2)
    for _ in range(2):
        with pytest.raises(TransientBackendError):
            backend.send(req("flaky call"))
    assert backend.send(req("flaky call")) == "ok"


# ---------------------------------------------------------------------------
# gateway behavior


def make_gateway(backend, fake_clock, cache_dir=None, retries=2, rpm=1000):
    config = GatewayConfig(
        requests_per_minute=rpm,
        max_retries=retries,
        backoff_base_ms=200,
        cache_dir=cache_dir,
    )
    return Gateway(backend, config, clock=fake_clock)


def test_gateway_records_requests_and_backend_calls(fake_clock):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    gw = make_gateway(backend, fake_clock)
    response = gw.complete(req())
    assert isinstance(response, ChatResponse)
    assert response.text == "world"
    assert response.cache_hit is False
    assert response.backend == "mock"
    assert [r.user_text for r in gw.requests] == ["hello"]
    assert gw.backend_calls == 1


def test_gateway_without_cache_dir_always_calls(fake_clock):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    gw = make_gateway(backend, fake_clock)
    gw.complete(req())
    gw.complete(req())
    assert gw.backend_calls == 2


def test_gateway_cache_hits_skip_backend(fake_clock, tmp_path):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    gw = make_gateway(backend, fake_clock, cache_dir=tmp_path)
    first = gw.complete(req())
    second = gw.complete(req())
    assert (first.cache_hit, second.cache_hit) == (False, True)
    assert second.text == "world"
    assert second.latency_ms == 0.0
    assert gw.backend_calls == 1
    assert len(gw.requests) == 2  # ledger still counts the cached request


def test_gateway_cache_persists_across_instances(fake_clock, tmp_path):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    make_gateway(backend, fake_clock, cache_dir=tmp_path).complete(req())

    fresh_backend = MockBackend()  # no rules: any real call would raise
    gw2 = make_gateway(fresh_backend, fake_clock, cache_dir=tmp_path)
    response = gw2.complete(req())
    assert response.text == "world"
    assert response.cache_hit is True
    assert fresh_backend.call_count == 0


def test_gateway_cache_writes_sidecar_metadata(fake_clock, tmp_path):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    make_gateway(backend, fake_clock, cache_dir=tmp_path).complete(req())
    digest = cache_key(req())
    meta = json.loads((tmp_path / f"{digest}.json").read_text(encoding="utf-8"))
    assert meta["backend"] == "mock"
    assert meta["response_chars"] == len("world")
    assert (tmp_path / f"{digest}.txt").read_text(encoding="utf-8") == "world"


def test_gateway_retries_transient_with_exponential_backoff(fake_clock):
    backend = MockBackend()
    backend.register_rule("flaky", "ok", failures_before_success=2)
    gw = make_gateway(backend, fake_clock, retries=2)
    response = gw.complete(req("flaky call"))
    assert response.text == "ok"
    assert gw.backend_calls == 3
    assert fake_clock.sleeps == [0.2, 0.4]


def test_gateway_exhausts_retries(fake_clock):
    backend = MockBackend()
    backend.register_rule("flaky", "ok", failures_before_success=99)
    gw = make_gateway(backend, fake_clock, retries=1)
    with pytest.raises(RetryExhaustedError, match="2 attempt"):
        gw.complete(req("flaky call"))
    assert gw.backend_calls == 2


def test_gateway_does_not_retry_permanent_errors(fake_clock):
    backend = MockBackend()  # empty script: every send raises MockRuleMissingError
    gw = make_gateway(backend, fake_clock, retries=3)
    with pytest.raises(MockRuleMissingError):
        gw.complete(req())
    assert gw.backend_calls == 1
    assert fake_clock.sleeps == []


def test_gateway_respects_rate_limit(fake_clock):
    backend = MockBackend()
    backend.register_rule("hello", "world")
    gw = make_gateway(backend, fake_clock, rpm=2)
    gw.complete(req())
    gw.complete(req())
    gw.complete(req())
    assert fake_clock.now() > 60.0 - 1e-9


# ---------------------------------------------------------------------------
# http backend classification


def http_backend(handler, **kw):
    kw.setdefault("api_key", "test-key")
    transport = httpx.MockTransport(handler)
    return HttpBackend("https://llm.example/v1/chat", transport=transport, **kw)


def completion_json(text):
    return {"choices": [{"message": {"content": text}}]}


def test_http_backend_success_extracts_message():
    seen = {}

    def handler(request):
        seen["payload"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=completion_json("fine"))

    backend = http_backend(handler)
    out = backend.send(req("question", system_text="be brief"))
    assert out == "fine"
    assert seen["auth"] == "Bearer test-key"
    assert seen["payload"]["messages"][0] == {"role": "system", "content": "be brief"}
    assert seen["payload"]["messages"][1]["content"] == "question"


@pytest.mark.parametrize("status", [429, 500, 503])
def test_http_backend_retryable_statuses(status):
    backend = http_backend(lambda request: httpx.Response(status, text="busy"))
    with pytest.raises(TransientBackendError, match=str(status)):
        backend.send(req())


@pytest.mark.parametrize("status", [400, 401, 404])
def test_http_backend_permanent_statuses(status):
    backend = http_backend(lambda request: httpx.Response(status, text="no"))
    with pytest.raises(PermanentBackendError, match=str(status)):
        backend.send(req())


def test_http_backend_timeout_is_transient():
    def handler(request):
        raise httpx.ConnectTimeout("slow")

    with pytest.raises(TransientBackendError, match="timed out"):
        http_backend(handler).send(req())


def test_http_backend_malformed_payload_is_permanent():
    backend = http_backend(lambda request: httpx.Response(200, json={"choices": []}))
    with pytest.raises(PermanentBackendError, match="malformed"):
        backend.send(req())


def test_http_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv("KBFORGE_API_KEY", raising=False)
    with pytest.raises(PermanentBackendError, match="KBFORGE_API_KEY"):
        HttpBackend("https://llm.example/v1/chat")


def test_http_backend_reads_key_from_environment(monkeypatch):
    monkeypatch.setenv("KBFORGE_API_KEY", "env-key")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=completion_json("ok"))

    backend = HttpBackend("https://llm.example/v1/chat", transport=httpx.MockTransport(handler))
    backend.send(req())
    assert seen["auth"] == "Bearer env-key"
