"""Experiment harness: configs, truth generation, repeated runs and CSV output."""

from .config import FILTERS, ConfigError, ExperimentConfig, load_config, parse_config
from .experiment import (
    ExperimentResult,
    RunRecord,
    TruthGenerationError,
    accumulated_rmse,
    filter_trace,
    generate_truth_and_obs,
    rmse_trace,
    run_experiment,
    run_repeat,
)

__all__ = [
    "FILTERS", "ConfigError", "ExperimentConfig", "load_config", "parse_config", "ExperimentResult", "RunRecord",
    "TruthGenerationError", "accumulated_rmse", "filter_trace", "generate_truth_and_obs", "rmse_trace",
    "run_experiment", "run_repeat",
]
