"""Config loading, phase orchestration and the command-line interface."""

from .config import ExperimentConfig, config_from_dict, load_config
from .run import run as run_experiment

__all__ = ["ExperimentConfig", "config_from_dict", "load_config", "run_experiment"]
