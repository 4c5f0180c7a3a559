"""Job right-sizing and meta-scheduling from layered declarative entities."""

__version__ = "0.1.0"

from .config import ConfigError, ResolvedConfig, config_from_text, load_config, validate
from .dispatch import DispatchDecision, DispatchError, JobContext, NoCandidate, Unschedulable, dispatch, explain
from .rank import LoadSnapshot, RankStrategy, Strategy, fetch_load

__all__ = [
    "ConfigError",
    "DispatchDecision",
    "DispatchError",
    "JobContext",
    "LoadSnapshot",
    "NoCandidate",
    "RankStrategy",
    "ResolvedConfig",
    "Strategy",
    "Unschedulable",
    "config_from_text",
    "dispatch",
    "explain",
    "fetch_load",
    "load_config",
    "validate",
]
