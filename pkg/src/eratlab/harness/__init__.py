"""Config-driven experiment runs, sweeps and reports."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import RunResult, render_report, run, sweep

__all__ = ["ConfigError", "ExperimentConfig", "RunResult", "load_config", "parse_config", "render_report", "run", "sweep"]
