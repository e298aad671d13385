"""Kernel-learning backward SDE filter with particle and ensemble Kalman baselines."""

from .baselines import ParticleSet, apf_step, enkf_step, run_apf, run_enkf
from .bsdef import BsdefConfig, FilterDivergenceError, FilteringState, SampleCloud, filter_step, run_filter
from .density import GaussianMixture, TrainingSet, mixture_mean
from .models import (
    ModelDomainError,
    ObservationModel,
    StateModel,
    cubic_root_observation,
    linear_observation,
    lennard_jones_model,
    lorenz96_model,
    ornstein_uhlenbeck_model,
    synthetic_model,
)
from .sde import RngStream, euler_forward, euler_time_inverse

__version__ = "0.1.0"

__all__ = [
    "ParticleSet", "apf_step", "enkf_step", "run_apf", "run_enkf", "BsdefConfig", "FilterDivergenceError",
    "FilteringState", "SampleCloud", "filter_step", "run_filter", "GaussianMixture", "TrainingSet",
    "mixture_mean", "ModelDomainError", "ObservationModel", "StateModel", "cubic_root_observation",
    "linear_observation", "lennard_jones_model", "lorenz96_model", "ornstein_uhlenbeck_model", "synthetic_model",
    "RngStream", "euler_forward", "euler_time_inverse",
]
