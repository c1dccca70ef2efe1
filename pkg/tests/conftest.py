"""Shared fixtures: a fake clock, the bundled corpus, and mock gateways."""

from __future__ import annotations

import threading

import pytest

from kbforge.config import WorkspaceConfig
from kbforge.gateway import Gateway, GatewayConfig, MockBackend
from kbforge.synthetic import build_mock_rules, make_bundle, make_corpus, register_script


class FakeClock:
    """Deterministic clock; sleep() advances it instead of blocking."""

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()
        self.sleeps: list[float] = []

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self.sleeps.append(seconds)
            self._t += seconds

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._t += seconds


@pytest.fixture
def fake_clock() -> FakeClock:
    return FakeClock()


@pytest.fixture(scope="session")
def bundle_corpus():
    """The default 120-ticket, 6-topic corpus with its topics."""
    return make_corpus(seed=0)


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    """Corpus and mock script written to disk once per session."""
    data_dir = tmp_path_factory.mktemp("bundle")
    make_bundle(data_dir, seed=0)
    return data_dir


def make_mock_gateway(tickets, topics, cache_dir=None) -> Gateway:
    backend = MockBackend()
    register_script(backend, build_mock_rules(tickets, topics))
    config = GatewayConfig(requests_per_minute=100000, cache_dir=cache_dir)
    return Gateway(backend, config)


@pytest.fixture
def bundle_gateway(bundle_corpus) -> Gateway:
    tickets, topics = bundle_corpus
    return make_mock_gateway(tickets, topics)


def bundle_config(bundle_dir, workspace) -> WorkspaceConfig:
    return WorkspaceConfig(
        workspace_dir=str(workspace),
        data_path=str(bundle_dir / "tickets.jsonl"),
        mock_script=str(bundle_dir / "mock_rules.json"),
    )
