"""Comparison filters: auxiliary particle filter and stochastic ensemble Kalman filter."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import density as dens
from .bsdef import FilterDivergenceError, FilterResult
from .density import GaussianMixture
from .models import ObservationModel, StateModel
from .sde import INIT, RngStream, as_generator, euler_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("particle weights must be nonnegative and sum to one")

    @classmethod
    def uniform(cls, particles) -> ParticleSet:
        particles = np.atleast_2d(particles)
        n = particles.shape[0]
        return cls(particles, np.full(n, 1.0 / n))

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def _normalize_log(logw: np.ndarray) -> np.ndarray:
    w = np.exp(logw - logsumexp(logw))
    return w / w.sum()


def systematic_resample(weights: np.ndarray, n: int, rng) -> np.ndarray:
    """Indices drawn by systematic (low-variance) resampling."""
    u = (as_generator(rng).random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right")


def apf_step(ps: ParticleSet, model: StateModel, obs_model: ObservationModel, observation, dt: float,
             n_aux: int, rng) -> ParticleSet:
    """One auxiliary particle filter step.

    Parents are preselected with the likelihood of their predicted mean
    (average of ``n_aux`` forward simulations), then propagated once and
    reweighted by the ratio of realised to predicted likelihood.
    """
    if n_aux < 1:
        raise ValueError("n_aux must be at least 1")
    gen = as_generator(rng)
    P = ps.particles.shape[0]

    aux = euler_forward(model, np.broadcast_to(ps.particles, (n_aux,) + ps.particles.shape), dt, gen).mean(axis=0)
    aux_ll = obs_model.log_likelihood(observation, aux)
    with np.errstate(divide="ignore"):
        first = np.log(ps.weights) + aux_ll
    if not np.any(np.isfinite(first)):
        raise FilterDivergenceError("all first-stage APF weights vanished")

    parents = systematic_resample(_normalize_log(first), P, gen)
    children = euler_forward(model, ps.particles[parents], dt, gen)
    second = obs_model.log_likelihood(observation, children) - aux_ll[parents]
    return ParticleSet(children, _normalize_log(second))


def enkf_step(members: np.ndarray, model: StateModel, obs_model: ObservationModel, observation, dt: float,
              rng) -> np.ndarray:
    """Stochastic EnKF step with perturbed predicted observations."""
    members = np.atleast_2d(members)
    E = members.shape[0]
    if E < 2:
        raise ValueError("ensemble needs at least two members")
    gen = as_generator(rng)

    forecast = euler_forward(model, members, dt, gen)
    predicted = obs_model.h(forecast) + obs_model.obs_std * gen.standard_normal((E, obs_model.r))
    xc = forecast - forecast.mean(axis=0)
    hc = predicted - predicted.mean(axis=0)
    c_xh = xc.T @ hc / (E - 1)
    c_hh = hc.T @ hc / (E - 1)
    if not np.isfinite(np.linalg.cond(c_hh)) or np.linalg.cond(c_hh) > 1e12:
        warnings.warn("singular observation-space covariance; adding 1e-8 ridge", RuntimeWarning, stacklevel=2)
        c_hh = c_hh + 1e-8 * np.eye(obs_model.r)
    gain = np.linalg.solve(c_hh.T, c_xh.T).T
    return forecast + (np.asarray(observation, dtype=float) - predicted) @ gain.T


def run_apf(model: StateModel, obs_model: ObservationModel, observations, dt: float, p0: GaussianMixture,
            n_particles: int, n_aux: int, rng: RngStream) -> FilterResult:
    ps = ParticleSet.uniform(dens.sample(p0, n_particles, rng.child(0, INIT)))
    estimates = [ps.mean()]
    for n, obs in enumerate(np.atleast_2d(observations) if len(observations) else [], start=1):
        try:
            ps = apf_step(ps, model, obs_model, obs, dt, n_aux, rng.child(n))
        except (FilterDivergenceError, FloatingPointError, ValueError) as exc:
            log.warning("APF run failed at step %d: %s", n, exc)
            return FilterResult(np.array(estimates), [], True, n, str(exc))
        estimates.append(ps.mean())
    return FilterResult(np.array(estimates), [])


def run_enkf(model: StateModel, obs_model: ObservationModel, observations, dt: float, p0: GaussianMixture,
             n_members: int, rng: RngStream) -> FilterResult:
    members = dens.sample(p0, n_members, rng.child(0, INIT))
    estimates = [members.mean(axis=0)]
    for n, obs in enumerate(np.atleast_2d(observations) if len(observations) else [], start=1):
        members = enkf_step(members, model, obs_model, obs, dt, rng.child(n))
        if not np.all(np.isfinite(members)):
            log.warning("EnKF run failed at step %d: non-finite ensemble", n)
            return FilterResult(np.array(estimates), [], True, n, "non-finite ensemble")
        estimates.append(members.mean(axis=0))
    return FilterResult(np.array(estimates), [])
