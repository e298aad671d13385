"""State dynamics and observation models.

Every state model carries its drift, the analytic divergence of the drift
(sum of diagonal partials), and a constant diagonal diffusion. Every callable
is vectorised over leading axes: an input of shape ``(..., d)`` maps to
``(..., d)`` for the drift and ``(...)`` for the divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ModelDomainError(ValueError):
    """Raised when a model is evaluated at one of its singular points."""


def fd_divergence(drift: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference estimate of sum_i d b_i / d x_i."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    total = np.zeros(x.shape[:-1])
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        total = total + (drift(x + e)[..., i] - drift(x - e)[..., i]) / (2.0 * h)
    return total


@dataclass(frozen=True)
class StateModel:
    name: str
    d: int
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: np.ndarray
    divergence_fn: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (self.d,)).copy()
        if self.d < 1:
            raise ValueError("state dimension must be positive")
        # zero diffusion is tolerated for deterministic limits
        if not np.all(sigma >= 0):
            raise ValueError("diffusion entries must be nonnegative")
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    def divergence(self, x: np.ndarray) -> np.ndarray:
        if self.divergence_fn is None:
            return fd_divergence(self.drift, x)
        return self.divergence_fn(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ObservationModel:
    """Discrete observation ``m = h(x) + xi`` with ``xi ~ N(0, diag(obs_std**2))``."""

    name: str
    r: int
    h: Callable[[np.ndarray], np.ndarray]
    obs_std: np.ndarray

    def __post_init__(self):
        std = np.broadcast_to(np.asarray(self.obs_std, dtype=float), (self.r,)).copy()
        # zero std is tolerated so the EnKF can run noiseless limits
        if not np.all(std >= 0):
            raise ValueError("observation noise std must be nonnegative")
        std.flags.writeable = False
        object.__setattr__(self, "obs_std", std)

    def log_likelihood(self, m: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Gaussian log-density of observation ``m`` given state(s) ``x``.

        Returns an array of shape ``x.shape[:-1]``.
        """
        z = (np.asarray(m, dtype=float) - self.h(np.asarray(x, dtype=float))) / self.obs_std
        return np.sum(-0.5 * z**2 - np.log(self.obs_std) - _LOG_SQRT_2PI, axis=-1)

    def likelihood(self, m: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_likelihood(m, x))


# -- state models ------------------------------------------------------------

def synthetic_model(alpha: float = 2.0, sigma_scalar: float = 0.2) -> StateModel:
    """Two-dimensional model b = alpha*(sin x2 + x1/(1+x1), cos x1 + x2/(1+x2))."""
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")

    def _check(x):
        if np.any(1.0 + x == 0.0):
            raise ModelDomainError("synthetic drift is singular at x_i = -1")

    def drift(x):
        x = np.asarray(x, dtype=float)
        _check(x)
        x1, x2 = x[..., 0], x[..., 1]
        return alpha * np.stack([np.sin(x2) + x1 / (1.0 + x1), np.cos(x1) + x2 / (1.0 + x2)], axis=-1)

    def divergence(x):
        _check(x)
        return alpha / (1.0 + x[..., 0]) ** 2 + alpha / (1.0 + x[..., 1]) ** 2

    return StateModel("synthetic", 2, drift, np.full(2, sigma_scalar), divergence,
                      {"alpha": alpha, "sigma": sigma_scalar})


def lennard_jones_model(A: float = 16.0, B: float = 4.0, sigma_scalar: float = 0.02) -> StateModel:
    """Target atom in the Lennard-Jones potential V = A/r^12 - B/r^6 of a platform atom at the origin."""
    if not (A > 0 and B > 0):
        raise ValueError("Lennard-Jones parameters A and B must be positive")

    def _radius(x):
        r = np.linalg.norm(x, axis=-1)
        if np.any(r == 0.0):
            raise ModelDomainError("Lennard-Jones potential is singular at r = 0")
        return r

    def drift(x):
        x = np.asarray(x, dtype=float)
        r = _radius(x)
        dv = -12.0 * A / r**13 + 6.0 * B / r**7
        return -(dv / r)[..., None] * x

    def divergence(x):
        r = _radius(x)
        dv = -12.0 * A / r**13 + 6.0 * B / r**7
        d2v = 156.0 * A / r**14 - 42.0 * B / r**8
        # 2-D Laplacian of a radial function
        return -(d2v + dv / r)

    return StateModel("lennard-jones", 2, drift, np.full(2, sigma_scalar), divergence,
                      {"A": A, "B": B, "sigma": sigma_scalar})


def lorenz96_model(d: int = 10, F: float = 8.0, sigma_scalar: float = 0.1) -> StateModel:
    """Lorenz-96 with cyclic indices: b_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F."""
    if d < 4:
        raise ValueError("Lorenz-96 requires d >= 4")

    def drift(x):
        x = np.asarray(x, dtype=float)
        return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F

    def divergence(x):
        return np.full(np.shape(x)[:-1], -float(d))

    return StateModel("lorenz96", d, drift, np.full(d, sigma_scalar), divergence,
                      {"d": d, "F": F, "sigma": sigma_scalar})


def ornstein_uhlenbeck_model(d: int = 1, theta: float = 1.0, sigma_scalar: float = 0.3) -> StateModel:
    """Linear mean-reverting model b(x) = -theta * x; the linear-Gaussian test bed."""
    if d < 1:
        raise ValueError("state dimension must be positive")

    def drift(x):
        return -theta * np.asarray(x, dtype=float)

    def divergence(x):
        return np.full(np.shape(x)[:-1], -theta * d)

    return StateModel("ou", d, drift, np.full(d, sigma_scalar), divergence,
                      {"d": d, "theta": theta, "sigma": sigma_scalar})


# -- observation models ------------------------------------------------------

def linear_observation(d: int, r_std: float) -> ObservationModel:
    if not r_std >= 0:
        raise ValueError("observation std must be nonnegative")
    return ObservationModel("linear", d, lambda x: np.asarray(x, dtype=float), np.full(d, r_std))


def cubic_root_observation(d: int, r_std: float) -> ObservationModel:
    """Signed real cube root of every component, so negative states stay real."""
    if not r_std >= 0:
        raise ValueError("observation std must be nonnegative")
    return ObservationModel("cubic-root", d, lambda x: np.cbrt(np.asarray(x, dtype=float)), np.full(d, r_std))


MODELS = {
    "synthetic": lambda p: synthetic_model(float(p.get("alpha", 2.0)), float(p.get("sigma", 0.2))),
    "lennard-jones": lambda p: lennard_jones_model(float(p.get("a", 16.0)), float(p.get("b", 4.0)),
                                                   float(p.get("sigma", 0.02))),
    "lorenz96": lambda p: lorenz96_model(int(p.get("d", 10)), float(p.get("f", 8.0)), float(p.get("sigma", 0.1))),
    "ou": lambda p: ornstein_uhlenbeck_model(int(p.get("d", 1)), float(p.get("theta", 1.0)),
                                             float(p.get("sigma", 0.3))),
}

OBSERVATIONS = {
    "linear": linear_observation,
    "cubic-root": cubic_root_observation,
}


def build_model(name: str, params: dict) -> StateModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory({k.lower(): v for k, v in params.items()})


def build_observation(name: str, d: int, std: float) -> ObservationModel:
    try:
        factory = OBSERVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown observation {name!r}; choose from {sorted(OBSERVATIONS)}") from None
    return factory(d, std)
