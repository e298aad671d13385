"""Kernel-learning backward SDE filter.

One filter step propagates the sample cloud forward, evaluates the predicted
density on the propagated points through the time-inverse FBSDE scheme
(fixed-point iteration with stochastic-approximation expectations), applies
the Bayesian update, learns a Gaussian-kernel mixture from the updated values
and resamples the cloud from it.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import density as dens
from .density import GaussianMixture, TrainingSet
from .models import ModelDomainError, ObservationModel, StateModel
from .sde import BACKWARD, CENTERS, INIT, PROPAGATE, RESAMPLE, SGD, RngStream, as_generator, euler_forward, \
    euler_time_inverse

log = logging.getLogger(__name__)

EXPECTATION_MODES = ("batch", "single", "mc")
BANDWIDTH_INITS = ("warm", "fixed", "adaptive")


class FilterDivergenceError(RuntimeError):
    """The observation is inconsistent with every sample: the posterior vanished."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ContractionWarning(RuntimeWarning):
    """|dt * divergence| >= 1 somewhere, so the fixed-point iteration need not converge."""


@dataclass(frozen=True)
class BsdefConfig:
    n_samples: int = 500
    n_kernels: int = 4
    fp_iterations: int = 10
    sgd_iterations: int = 100
    lr: float = 1e-2
    dt: float = 0.1
    seed: int = 0
    init_weight: float = 0.5
    init_bandwidth: float = 2.0
    lr_lambda: float | None = None
    expectation: str = "batch"
    mc_samples: int = 100
    bandwidth_init: str = "adaptive"
    log_bandwidth: bool = True

    def __post_init__(self):
        for name in ("n_samples", "n_kernels", "fp_iterations", "sgd_iterations", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_kernels > self.n_samples:
            raise ValueError("n_kernels cannot exceed n_samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.expectation not in EXPECTATION_MODES:
            raise ValueError(f"expectation must be one of {EXPECTATION_MODES}")
        if self.bandwidth_init not in BANDWIDTH_INITS:
            raise ValueError(f"bandwidth_init must be one of {BANDWIDTH_INITS}")

    @property
    def lr_alpha(self) -> float:
        return self.lr

    @property
    def lr_bandwidth(self) -> float:
        return self.lr if self.lr_lambda is None else self.lr_lambda


@dataclass(frozen=True, eq=False)
class SampleCloud:
    points: np.ndarray
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class FilteringState:
    cloud: SampleCloud
    density: GaussianMixture
    step_index: int = 0
    training: TrainingSet | None = None
    diagnostics: dict = field(default_factory=dict)


# -- prediction ----------------------------------------------------------------

def fixed_point_iterate(expectations: np.ndarray, coef, y0) -> np.ndarray:
    """Run Y^{l+1} = E^l - coef * Y^l over the leading axis of ``expectations``."""
    y = np.asarray(y0, dtype=float)
    for e in expectations:
        y = e - coef * y
    return y


def _expectation_estimates(evals: np.ndarray, mode: str, L: int) -> np.ndarray:
    if mode == "batch":
        return np.cumsum(evals, axis=0) / np.arange(1, L + 1).reshape((L,) + (1,) * (evals.ndim - 1))
    if mode == "single":
        return evals
    return np.broadcast_to(evals.mean(axis=0), (L,) + evals.shape[1:])


def predict_at_points(model: StateModel, prev_density: GaussianMixture, points, dt: float, L: int, rng,
                      mode: str = "batch", mc_samples: int = 100) -> np.ndarray:
    """Predicted filtering density at each row of ``points``.

    ``mode`` picks how the conditional expectation inside the fixed-point
    iteration is estimated: ``batch`` (running mean of all backward samples
    drawn so far), ``single`` (the current backward sample only) or ``mc``
    (one fixed Monte Carlo mean over ``mc_samples`` draws).
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    if mode not in EXPECTATION_MODES:
        raise ValueError(f"mode must be one of {EXPECTATION_MODES}")
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite prediction point")
    gen = as_generator(rng)

    coef = dt * model.divergence(x)
    if np.any(np.abs(coef) >= 1.0):
        warnings.warn(f"|dt*divergence| reaches {np.max(np.abs(coef)):.3g}; fixed-point iteration may diverge",
                      ContractionWarning, stacklevel=2)

    n_draws = mc_samples if mode == "mc" else L
    backward = euler_time_inverse(model, np.broadcast_to(x, (n_draws,) + x.shape), dt, gen)
    evals = prev_density(backward)
    y = fixed_point_iterate(_expectation_estimates(evals, mode, L), coef, prev_density(x))
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite value in the fixed-point iteration")
    return np.maximum(y, 0.0)


def predict_at_point(model: StateModel, prev_density: GaussianMixture, x, dt: float, L: int, rng,
                     mode: str = "batch", mc_samples: int = 100) -> float:
    return float(predict_at_points(model, prev_density, np.asarray(x, dtype=float)[None, :], dt, L, rng,
                                   mode, mc_samples)[0])


# -- update --------------------------------------------------------------------

def bayes_update(predicted, obs_model: ObservationModel, observation, points) -> np.ndarray:
    """Multiply predicted values by the likelihood and renormalise.

    The normalising constant is chosen so the updated values have the same
    sample mean as the predicted ones. Computed in log space, so extreme
    likelihood ratios do not underflow.
    """
    predicted = np.asarray(predicted, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(predicted) + obs_model.log_likelihood(observation, points)
    top = np.max(logw)
    if not np.isfinite(top):
        raise FilterDivergenceError("posterior is zero at every sample")
    w = np.exp(logw - top)
    return w * (predicted.mean() / w.mean())


# -- kernel learning -----------------------------------------------------------

def _greedy_match(new_centers: np.ndarray, old_centers: np.ndarray) -> np.ndarray:
    """Index of the old kernel assigned to each new center, closest pairs first."""
    dist = np.linalg.norm(new_centers[:, None, :] - old_centers[None, :, :], axis=-1)
    K = new_centers.shape[0]
    match = np.empty(K, dtype=int)
    for flat in np.argsort(dist, axis=None, kind="stable"):
        i, j = divmod(int(flat), old_centers.shape[0])
        if dist[i, j] < np.inf:
            match[i] = j
            dist[i, :] = np.inf
            dist[:, j] = np.inf
    return match


def initial_mixture(centers: np.ndarray, previous: GaussianMixture, cfg: BsdefConfig,
                    scale: float = 1.0, center_values: np.ndarray | None = None) -> GaussianMixture:
    """Starting point for SGD.

    ``warm`` reuses the weights and bandwidths of the previous mixture (matched
    by center proximity) when the kernel count is unchanged; ``adaptive`` sets
    every bandwidth to sqrt(2) times the per-axis spread of the new centers;
    otherwise the configured guesses are used. ``scale`` is the magnitude of
    the training values: warm weights are divided by it, configured guesses
    are already relative to it.

    When ``center_values`` is given, kernels sitting on zero-valued points
    (selected only because fewer than K points carry mass) start at the weight
    floor and are left out of the adaptive spread.
    """
    K, d = centers.shape
    live = np.ones(K, dtype=bool) if center_values is None else np.asarray(center_values) > 0
    weights = np.full(K, cfg.init_weight)
    bandwidths = np.full((K, d), cfg.init_bandwidth)
    if cfg.bandwidth_init == "warm" and previous.K == K and previous.d == d:
        match = _greedy_match(centers, previous.centers)
        weights = np.maximum(previous.weights[match] / scale, dens.ALPHA_FLOOR)
        bandwidths = previous.bandwidths[match]
    elif cfg.bandwidth_init == "adaptive" and K > 1:
        spread = np.sqrt(2.0) * centers[live].std(axis=0)
        bandwidths = np.broadcast_to(np.maximum(spread, dens.LAMBDA_FLOOR), (K, d))
    weights = np.where(live, weights, dens.ALPHA_FLOOR)
    return GaussianMixture(centers, weights, bandwidths)


def learn_density(training: TrainingSet, previous: GaussianMixture, cfg: BsdefConfig, rng: RngStream,
                  step: int) -> GaussianMixture:
    """Select centers, fit weights and bandwidths, and return a unit-mass mixture.

    SGD runs on values scaled to unit maximum so bandwidth step sizes do not
    depend on the magnitude of the density values.
    """
    idx = dens.select_center_indices(training, cfg.n_kernels, rng.child(step, CENTERS))
    centers = training.points[idx]
    scale = float(np.max(training.values))
    unit = TrainingSet(training.points, training.values / scale)
    m0 = initial_mixture(centers, previous, cfg, scale, unit.values[idx])
    fitted = dens.fit_sgd(m0, unit, cfg.lr_alpha, cfg.lr_bandwidth, cfg.sgd_iterations, rng.child(step, SGD),
                          log_bandwidth=cfg.log_bandwidth)
    return normalized(fitted)


def normalized(m: GaussianMixture) -> GaussianMixture:
    return m.replace(weights=m.weights / m.total_mass())


# -- filter loop ---------------------------------------------------------------

def initial_state(p0: GaussianMixture, cfg: BsdefConfig, rng: RngStream) -> FilteringState:
    points = dens.sample(p0, cfg.n_samples, rng.child(0, INIT))
    return FilteringState(SampleCloud(points, p0(points)), p0, 0)


def filter_step(state: FilteringState, model: StateModel, obs_model: ObservationModel | None, observation,
                cfg: BsdefConfig, rng: RngStream) -> FilteringState:
    """Advance the filter by one observation gap.

    With ``observation=None`` the Bayesian update is skipped and the learned
    mixture approximates the predicted density.
    """
    n = state.step_index + 1
    propagated = euler_forward(model, state.cloud.points, cfg.dt, rng.child(n, PROPAGATE))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ContractionWarning)
        predicted = predict_at_points(model, state.density, propagated, cfg.dt, cfg.fp_iterations,
                                      rng.child(n, BACKWARD), cfg.expectation, cfg.mc_samples)
    diagnostics = {"contraction_warning": bool(caught)}
    if observation is None:
        values = predicted
        if not np.any(values > 0):
            raise FilterDivergenceError("predicted density vanished at every sample", n)
    else:
        try:
            values = bayes_update(predicted, obs_model, observation, propagated)
        except FilterDivergenceError as exc:
            raise FilterDivergenceError(str(exc), n) from exc
    training = TrainingSet(propagated, values)
    fitted = learn_density(training, state.density, cfg, rng, n)
    points = dens.sample(fitted, cfg.n_samples, rng.child(n, RESAMPLE))
    return FilteringState(SampleCloud(points, fitted(points)), fitted, n, training, diagnostics)


@dataclass
class FilterResult:
    estimates: np.ndarray
    densities: list
    failed: bool = False
    failed_step: int | None = None
    message: str = ""


def run_filter(model: StateModel, obs_model: ObservationModel, observations, cfg: BsdefConfig,
               p0: GaussianMixture, rng: RngStream | None = None,
               checkpoint_dir: str | Path | None = None) -> FilterResult:
    """Filter a whole observation sequence; ``observations[n-1]`` belongs to step n.

    A diverged step ends the run early: the result holds the estimates so far
    and ``failed`` is set.
    """
    rng = RngStream(cfg.seed) if rng is None else rng
    state = initial_state(p0, cfg, rng)
    estimates = [dens.mixture_mean(state.density)]
    densities = [state.density]
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        write_checkpoint(checkpoint_dir, state)
    for obs in np.atleast_2d(observations) if len(observations) else []:
        try:
            state = filter_step(state, model, obs_model, obs, cfg, rng)
        except (FilterDivergenceError, FloatingPointError, ModelDomainError) as exc:
            step = getattr(exc, "step", None) or state.step_index + 1
            log.warning("BSDEF run failed at step %d: %s", step, exc)
            return FilterResult(np.array(estimates), densities, True, step, str(exc))
        estimates.append(dens.mixture_mean(state.density))
        densities.append(state.density)
        if checkpoint_dir is not None:
            write_checkpoint(checkpoint_dir, state)
    return FilterResult(np.array(estimates), densities)


def write_checkpoint(directory: Path, state: FilteringState) -> Path:
    path = Path(directory) / f"step_{state.step_index:05d}.txt"
    path.write_text("# mixture\n" + dens.dumps_mixture(state.density)
                    + "# cloud\n" + dens.dumps_cloud(state.cloud.points, state.cloud.values))
    return path


def read_checkpoint(path: str | Path) -> tuple[GaussianMixture, SampleCloud]:
    text = Path(path).read_text()
    mix_part, cloud_part = text.split("# cloud\n")
    points, values = dens.loads_cloud(cloud_part)
    return dens.loads_mixture(mix_part), SampleCloud(points, values)
