"""Support tickets in, compact searchable knowledge base out."""

from .config import ConfigError, WorkspaceConfig, load_config
from .pipeline import CompareResult, StageError, run_compare, run_stage

__version__ = "0.1.0"

__all__ = [
    "CompareResult",
    "ConfigError",
    "StageError",
    "WorkspaceConfig",
    "load_config",
    "run_compare",
    "run_stage",
    "__version__",
]
