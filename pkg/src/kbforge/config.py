"""Workspace configuration: one frozen object feeding every stage.

The digest over the logical fields is what stage stamps and the final
report carry. Throughput knobs (parallelism, rate limit, retry pacing) are
left out of it on purpose: they change wall time, not outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .fsutil import canonical_json, read_json, sha256_text

VALID_BACKENDS = ("mock", "http")
VALID_DATA_FORMATS = ("jsonl", "csv")
VALID_METHODS = ("raw", "per_ticket", "cluster", "multi_agent", "multi_level")

# Fields that never influence artifact content.
_NON_LOGICAL_FIELDS = frozenset(
    {"max_parallel", "requests_per_minute", "max_retries", "backoff_base_ms"}
)


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class WorkspaceConfig:
    workspace_dir: str = "workspace"
    backend: str = "mock"
    data_path: str = "data/tickets.jsonl"
    data_format: str = "jsonl"
    mock_script: str | None = None
    endpoint_url: str | None = None

    discovery_model: str = "default-model"
    categorize_model: str = "default-model"
    synthesize_model: str = "default-model"
    answer_model: str = "default-model"
    judge_model: str = "default-model"

    discovery_mode: str = "batch"
    sample_size: int = 200
    discovery_batch_size: int = 50
    prompt_budget_chars: int = 24000

    standard_max: int = 10
    hierarchical_min: int = 50
    synthesis_batch_size: int = 10

    retrieval_k: int = 10
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    cluster_dim: int = 256
    cluster_threshold: float = 0.5

    eval_runs: int = 3
    methods: tuple[str, ...] = VALID_METHODS
    baseline: str = "raw"

    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_field_chars: int = 8000
    max_comments: int = 20
    seed: int = 0

    max_parallel: int = 8
    requests_per_minute: int = 6000
    max_retries: int = 2
    backoff_base_ms: int = 200

    def __post_init__(self):
        if self.backend not in VALID_BACKENDS:
            raise ConfigError(f"backend must be one of {VALID_BACKENDS}, got {self.backend!r}")
        if self.data_format not in VALID_DATA_FORMATS:
            raise ConfigError(
                f"data_format must be one of {VALID_DATA_FORMATS}, got {self.data_format!r}"
            )
        if self.backend == "mock" and not self.mock_script:
            raise ConfigError("mock backend needs mock_script")
        if self.backend == "http" and not self.endpoint_url:
            raise ConfigError("http backend needs endpoint_url")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        bad = [m for m in self.methods if m not in VALID_METHODS]
        if bad:
            raise ConfigError(f"unknown methods: {bad}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if self.baseline not in VALID_METHODS:
            raise ConfigError(f"unknown baseline: {self.baseline!r}")
        if self.eval_runs < 1:
            raise ConfigError("eval_runs must be at least 1")
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k must be at least 1")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))


def config_from_dict(payload: dict, base_dir: Path | None = None) -> WorkspaceConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(WorkspaceConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dict(payload)
    for key in ("methods", "split_fractions"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    if base_dir is not None:
        for key in ("data_path", "mock_script"):
            raw = values.get(key)
            if raw and not Path(raw).is_absolute():
                values[key] = str(base_dir / raw)
    try:
        return WorkspaceConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> WorkspaceConfig:
    """Read a flat JSON config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        payload = read_json(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload, base_dir=path.resolve().parent)


def logical_fields(config: WorkspaceConfig) -> dict:
    """The configuration that determines artifact content, path-free."""
    out = {}
    for f in dataclasses.fields(WorkspaceConfig):
        if f.name in _NON_LOGICAL_FIELDS or f.name in ("workspace_dir", "data_path", "mock_script"):
            continue
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_digest(config: WorkspaceConfig, content_hashes: dict[str, str]) -> str:
    """Digest of the logical config plus the input content hashes.

    ``content_hashes`` carries digests of the actual inputs (ticket data,
    mock script) so the same config over different data gets a different
    digest even though paths are excluded.
    """
    payload = {"config": logical_fields(config), "inputs": dict(sorted(content_hashes.items()))}
    return sha256_text(canonical_json(payload))
