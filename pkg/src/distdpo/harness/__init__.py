"""Config-driven experiment runner, report comparison and CLI."""
from .compare import SchemaError, compare
from .config import MODES, ConfigError, ExperimentConfig, load_config, parse_config
from .runner import RunError, RunResult, run

__all__ = ["MODES", "ConfigError", "ExperimentConfig", "RunError", "RunResult", "SchemaError",
           "compare", "load_config", "parse_config", "run"]
