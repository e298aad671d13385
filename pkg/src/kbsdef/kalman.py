"""Exact Kalman filter for the linear-Gaussian (Ornstein-Uhlenbeck) test bed."""

from __future__ import annotations

import numpy as np

from .models import ObservationModel, StateModel


def ou_transition(theta: float, sigma: np.ndarray, dt: float) -> tuple[float, np.ndarray]:
    """Exact OU transition over dt: mean factor exp(-theta dt) and per-axis variance."""
    a = np.exp(-theta * dt)
    q = sigma**2 * (1.0 - a * a) / (2.0 * theta) if theta != 0 else sigma**2 * dt
    return a, q


def kalman_filter(model: StateModel, obs_model: ObservationModel, observations, dt: float,
                  m0, s0) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and covariances at steps 0..N_T (step 0 is the prior).

    Requires the ``ou`` state model and the linear observation.
    """
    if model.name != "ou" or obs_model.name != "linear":
        raise ValueError("the exact Kalman oracle needs the 'ou' model with linear observations")
    d = model.d
    a, q = ou_transition(model.params["theta"], model.sigma, dt)
    Q = np.diag(q)
    R = np.diag(obs_model.obs_std**2)
    mean = np.broadcast_to(np.asarray(m0, dtype=float), (d,)).copy()
    cov = np.diag(np.broadcast_to(np.asarray(s0, dtype=float), (d,)) ** 2)
    means, covs = [mean.copy()], [cov.copy()]
    for y in np.atleast_2d(observations) if len(observations) else []:
        mean = a * mean
        cov = a * a * cov + Q
        S = cov + R
        G = np.linalg.solve(S, cov).T
        mean = mean + G @ (y - mean)
        cov = (np.eye(d) - G) @ cov
        means.append(mean.copy())
        covs.append(cov.copy())
    return np.array(means), np.array(covs)


def ou_marginal(theta: float, sigma: float, t: float, m0: float, s0: float) -> tuple[float, float]:
    """Mean and variance of the 1-D OU law at time t from N(m0, s0^2)."""
    a = np.exp(-theta * t)
    return a * m0, a * a * s0**2 + sigma**2 * (1.0 - a * a) / (2.0 * theta)
