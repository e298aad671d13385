"""Gaussian-kernel mixture densities learned from scattered density values.

A mixture is ``p(x) = sum_k alpha_k exp(-sum_j (c_kj - x_j)^2 / lam_kj^2)``.
Each kernel is an unnormalised Gaussian with per-axis standard deviation
``lam / sqrt(2)`` and integral ``alpha_k pi^(d/2) prod_j lam_kj``.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from .sde import as_generator

ALPHA_FLOOR = 1e-8
LAMBDA_FLOOR = 1e-4


class NonFiniteGradientError(FloatingPointError):
    pass


def _frozen(a, shape=None) -> np.ndarray:
    a = np.array(a, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    centers: np.ndarray
    weights: np.ndarray
    bandwidths: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        K, d = c.shape
        w = np.asarray(self.weights, dtype=float).reshape(K)
        lam = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), (K, d))
        if not (np.all(w > 0) and np.all(lam > 0)):
            raise ValueError("mixture weights and bandwidths must be strictly positive")
        object.__setattr__(self, "centers", _frozen(c))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bandwidths", _frozen(lam))

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def gaussian(cls, mean, std) -> GaussianMixture:
        """Single kernel reproducing the normalised density N(mean, diag(std^2))."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        lam = np.broadcast_to(np.asarray(std, dtype=float), mean.shape) * np.sqrt(2.0)
        alpha = 1.0 / (np.pi ** (mean.size / 2) * np.prod(lam))
        return cls(mean[None, :], [alpha], lam[None, :])

    def replace(self, **changes) -> GaussianMixture:
        fields = {"centers": self.centers, "weights": self.weights, "bandwidths": self.bandwidths}
        fields.update(changes)
        return GaussianMixture(**fields)

    def kernels(self, x) -> np.ndarray:
        """phi_k(x) for every kernel; shape ``x.shape[:-1] + (K,)``."""
        x = np.asarray(x, dtype=float)
        z = (x[..., None, :] - self.centers) / self.bandwidths
        return np.exp(-np.sum(z * z, axis=-1))

    def __call__(self, x) -> np.ndarray:
        return self.kernels(x) @ self.weights

    eval = __call__

    def mass_weights(self) -> np.ndarray:
        """Kernel integrals up to the common factor pi^(d/2)."""
        return self.weights * np.prod(self.bandwidths, axis=1)

    def total_mass(self) -> float:
        return float(np.pi ** (self.d / 2) * np.sum(self.mass_weights()))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.points, dtype=float))
        v = np.asarray(self.values, dtype=float).reshape(p.shape[0])
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("training values must be finite and nonnegative")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self) -> int:
        return self.points.shape[0]


def eval(m: GaussianMixture, x) -> np.ndarray:  # noqa: A001 - mirrors the mixture API
    return m(x)


def loss(m: GaussianMixture, t: TrainingSet) -> float:
    """Mean squared mismatch between the mixture and the training values."""
    r = m(t.points) - t.values
    return float(np.mean(r * r))


def grad_single(m: GaussianMixture, x, target: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``(m(x) - target)^2`` with respect to weights and bandwidths."""
    x = np.asarray(x, dtype=float)
    diff2 = (m.centers - x) ** 2
    phi = np.exp(-np.sum(diff2 / m.bandwidths**2, axis=1))
    resid2 = 2.0 * (phi @ m.weights - target)
    g_alpha = resid2 * phi
    g_lam = (resid2 * m.weights * phi)[:, None] * 2.0 * diff2 / m.bandwidths**3
    return g_alpha, g_lam


def _importance_probabilities(values: np.ndarray) -> np.ndarray | None:
    total = values.sum()
    if total > 0:
        return values / total
    return None


def select_centers(t: TrainingSet, K: int, rng) -> np.ndarray:
    """Pick K distinct training points, successively, with probability proportional to value.

    Uses Gumbel top-k keys, which reproduces sequential sampling without
    replacement. Zero-valued points are only used once every positive point
    is taken; they are then filled uniformly.
    """
    return t.points[select_center_indices(t, K, rng)].copy()


def select_center_indices(t: TrainingSet, K: int, rng) -> np.ndarray:
    """Row indices of the points chosen by :func:`select_centers`."""
    N = len(t)
    if K > N:
        raise ValueError(f"cannot select {K} centers from {N} points")
    gen = as_generator(rng)
    gumbel = gen.gumbel(size=N)
    positive = t.values > 0
    if not positive.any():
        warnings.warn("all density values are zero; selecting centers uniformly", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore"):
        keys = np.where(positive, np.log(t.values) + gumbel, -np.inf)
    order = np.lexsort((-gumbel, -keys))
    return order[:K]


def fit_sgd(m0: GaussianMixture, t: TrainingSet, lr_alpha: float, lr_lambda: float, J: int, rng,
            log_bandwidth: bool = False) -> GaussianMixture:
    """Stochastic gradient descent on weights and bandwidths, centers held fixed.

    Each iteration draws one training row with probability proportional to
    its value (with replacement) and takes a single-sample gradient step.
    Weights and bandwidths are clipped to small positive floors afterwards.

    With ``log_bandwidth`` the bandwidth step is taken in log space,
    ``lam *= exp(-lr_lambda * lam * dF/dlam)``, which makes it independent of
    the length scale of the state.
    """
    if J < 0:
        raise ValueError("J must be nonnegative")
    if lr_alpha < 0 or lr_lambda < 0:
        raise ValueError("learning rates must be nonnegative")
    if J == 0:
        return m0
    gen = as_generator(rng)
    picks = gen.choice(len(t), size=J, p=_importance_probabilities(t.values))

    centers = np.array(m0.centers)
    alpha = np.array(m0.weights)
    lam = np.array(m0.bandwidths)
    inv_lam2 = 1.0 / lam**2
    for j, i in enumerate(picks):
        x = t.points[i]
        diff2 = (centers - x) ** 2
        phi = np.exp(-np.sum(diff2 * inv_lam2, axis=1))
        resid2 = 2.0 * (phi @ alpha - t.values[i])
        g_alpha = resid2 * phi
        g_lam = (resid2 * alpha * phi)[:, None] * 2.0 * diff2 / lam**3
        if not (np.all(np.isfinite(g_alpha)) and np.all(np.isfinite(g_lam))):
            raise NonFiniteGradientError(f"non-finite gradient at SGD iteration {j} (training row {i})")
        alpha = np.maximum(alpha - lr_alpha * g_alpha, ALPHA_FLOOR)
        if log_bandwidth:
            lam = np.maximum(lam * np.exp(-lr_lambda * lam * g_lam), LAMBDA_FLOOR)
        else:
            lam = np.maximum(lam - lr_lambda * g_lam, LAMBDA_FLOOR)
        inv_lam2 = 1.0 / lam**2
    return GaussianMixture(centers, alpha, lam)


def mixture_mean(m: GaussianMixture) -> np.ndarray:
    w = m.mass_weights()
    return w @ m.centers / w.sum()


def mixture_cov(m: GaussianMixture) -> np.ndarray:
    """Covariance of the normalised mixture (kernel variances are lam^2 / 2)."""
    w = m.mass_weights()
    w = w / w.sum()
    mu = w @ m.centers
    dc = m.centers - mu
    return (w[:, None] * dc).T @ dc + np.diag(w @ (m.bandwidths**2 / 2.0))


def sample(m: GaussianMixture, n: int, rng) -> np.ndarray:
    """Draw n points from the normalised mixture."""
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    w = m.mass_weights()
    k = gen.choice(m.K, size=n, p=w / w.sum())
    return m.centers[k] + m.bandwidths[k] / np.sqrt(2.0) * gen.standard_normal((n, m.d))


def marginal_band(m: GaussianMixture, dim: int, level: float, n_mc: int, rng) -> tuple[float, float]:
    """Monte Carlo central credible interval of coordinate ``dim``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    xs = sample(m, n_mc, rng)[:, dim]
    lo, hi = np.quantile(xs, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


# -- text records --------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_mixture(m: GaussianMixture) -> str:
    """``K d`` header then one row per kernel: center..., weight, bandwidth..."""
    lines = [f"{m.K} {m.d}"]
    for c, a, lam in zip(m.centers, m.weights, m.bandwidths):
        lines.append(" ".join([*map(_fmt, c), _fmt(a), *map(_fmt, lam)]))
    return "\n".join(lines) + "\n"


def loads_mixture(text: str) -> GaussianMixture:
    rows = [ln.split() for ln in io.StringIO(text) if ln.strip() and not ln.startswith("#")]
    K, d = (int(v) for v in rows[0])
    body = np.array([[float(v) for v in r] for r in rows[1:1 + K]]).reshape(K, 2 * d + 1)
    return GaussianMixture(body[:, :d], body[:, d], body[:, d + 1:])


def dumps_cloud(points: np.ndarray, values: np.ndarray) -> str:
    """``N d`` header then one row per sample: point..., density value."""
    points = np.atleast_2d(points)
    lines = [f"{points.shape[0]} {points.shape[1]}"]
    for p, v in zip(points, values):
        lines.append(" ".join([*map(_fmt, p), _fmt(v)]))
    return "\n".join(lines) + "\n"


def loads_cloud(text: str) -> tuple[np.ndarray, np.ndarray]:
    rows = [ln.split() for ln in io.StringIO(text) if ln.strip() and not ln.startswith("#")]
    N, d = (int(v) for v in rows[0])
    body = np.array([[float(v) for v in r] for r in rows[1:1 + N]]).reshape(N, d + 1)
    return body[:, :d], body[:, d]
