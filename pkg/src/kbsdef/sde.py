"""Euler-Maruyama stepping and seeded random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelDomainError, StateModel

# purpose tags mixed into stream keys
TRUTH, OBSERVE, INIT, PROPAGATE, BACKWARD, CENTERS, SGD, RESAMPLE, AUX, PERTURB = range(10)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    ``stream_id`` is an integer or a tuple of integers; ``child`` appends
    keys, so streams derived from distinct key paths never coincide.
    """

    seed: int
    stream_id: int | tuple[int, ...] = ()

    @property
    def key(self) -> tuple[int, ...]:
        if isinstance(self.stream_id, tuple):
            return self.stream_id
        return (int(self.stream_id),)

    def child(self, *keys: int) -> RngStream:
        return RngStream(self.seed, self.key + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))


def as_generator(rng: RngStream | np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


def _step(model: StateModel, x, dt, rng, sign):
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    b = model.drift(x)
    if not np.all(np.isfinite(b)):
        raise ModelDomainError("non-finite drift evaluation")
    omega = as_generator(rng).standard_normal(x.shape)
    return x + sign * b * dt + model.sigma * np.sqrt(dt) * omega


def euler_forward(model: StateModel, x, dt: float, rng) -> np.ndarray:
    """One step x + b(x) dt + sigma sqrt(dt) omega; ``x`` may be a batch of shape (..., d)."""
    return _step(model, x, dt, rng, 1.0)


def euler_time_inverse(model: StateModel, x, dt: float, rng) -> np.ndarray:
    """One step of the time-reversed scheme x - b(x) dt + sigma sqrt(dt) omega."""
    return _step(model, x, dt, rng, -1.0)


def simulate(model: StateModel, x0, dt: float, n_steps: int, rng) -> np.ndarray:
    """Forward trajectory including the starting point, shape (n_steps + 1, ...)."""
    gen = as_generator(rng)
    out = [np.asarray(x0, dtype=float)]
    for _ in range(n_steps):
        out.append(euler_forward(model, out[-1], dt, gen))
    return np.stack(out)
