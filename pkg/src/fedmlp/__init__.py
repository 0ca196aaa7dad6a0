"""Multi-level prototype federated learning on staged, heterogeneous client data."""
from .config import ConfigError, ExperimentConfig, parse_config
from .federation import run_experiment, simulate

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "run_experiment", "simulate"]
