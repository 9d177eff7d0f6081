"""Configuration, experiment orchestration, and the command-line interface."""

from .config import ExperimentConfig, load_config
from .pipeline import Report, run_pipeline, sweep_sfm

__all__ = ["ExperimentConfig", "load_config", "Report", "run_pipeline", "sweep_sfm"]
