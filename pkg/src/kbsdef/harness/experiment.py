"""Truth simulation, repeated filter runs, RMSE aggregation and CSV output."""

from __future__ import annotations

import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import run_apf, run_enkf
from ..bsdef import FilterDivergenceError, FilterResult, run_filter
from ..density import GaussianMixture
from ..kalman import kalman_filter
from ..models import ModelDomainError, StateModel
from ..sde import INIT, OBSERVE, TRUTH, RngStream, euler_forward
from .config import FILTERS, ExperimentConfig

log = logging.getLogger(__name__)

FAILURE_THRESHOLD = 0.2
# stream slot for truth and observations, distinct from every filter index
_TRUTH_SLOT = len(FILTERS)
_LJ_MIN_RADIUS = 0.1
_LJ_MAX_REDRAWS = 100


class TruthGenerationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class RunRecord:
    """One repeat: truth at steps 0..N_T, observations at steps 1..N_T, per-filter estimates."""

    repeat: int
    truth: np.ndarray
    observations: np.ndarray
    estimates: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


def experiment_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def repeat_stream(cfg: ExperimentConfig, repeat: int, slot: int) -> RngStream:
    """Stream rooted at (experiment, repeat, filter); filters extend it with (step, purpose)."""
    return RngStream(cfg.seed, (experiment_key(cfg.name), repeat, slot))


def _truth_guard(model: StateModel):
    if model.name == "lennard-jones":
        return lambda x: np.linalg.norm(x) >= _LJ_MIN_RADIUS
    return None


def generate_truth_and_obs(cfg: ExperimentConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Simulate the hidden state with ``truth_substeps`` Euler steps per gap and observe it.

    Returns the truth at steps 0..N_T, shape (N_T + 1, d), and observations at
    steps 1..N_T, shape (N_T, r).
    """
    model = cfg.build_model()
    obs_model = cfg.build_observation(model)
    guard = _truth_guard(model)
    h = cfg.dt / cfg.truth_substeps

    x = cfg.initial_mean(model.d) + cfg.truth_std * rng.child(0, INIT).generator().standard_normal(model.d)
    truth = [x]
    for n in range(1, cfg.n_steps + 1):
        gen = rng.child(n, TRUTH).generator()
        for _ in range(cfg.truth_substeps):
            try:
                nxt = euler_forward(model, x, h, gen)
                redraws = 0
                while guard is not None and not guard(nxt):
                    redraws += 1
                    if redraws > _LJ_MAX_REDRAWS:
                        raise TruthGenerationError("truth keeps hitting the Lennard-Jones core", n)
                    nxt = euler_forward(model, x, h, gen)
            except ModelDomainError as exc:
                raise TruthGenerationError(str(exc), n) from exc
            if not np.all(np.isfinite(nxt)):
                raise TruthGenerationError("non-finite truth state", n)
            x = nxt
        truth.append(x)
    truth = np.array(truth)
    noise = rng.child(0, OBSERVE).generator().standard_normal((cfg.n_steps, obs_model.r))
    observations = obs_model.h(truth[1:]) + obs_model.obs_std * noise
    return truth, observations.reshape(cfg.n_steps, obs_model.r)


def rmse_trace(truth, estimates) -> np.ndarray:
    """Per-step RMSE over repeats and state dimensions.

    ``truth`` and ``estimates`` have shape (R, N_T, d) or (N_T, d).
    """
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.shape != estimates.shape:
        raise ValueError("truth and estimates must have the same shape")
    if truth.ndim == 2:
        truth, estimates = truth[None], estimates[None]
    return np.sqrt(np.mean((estimates - truth) ** 2, axis=(0, 2)))


def accumulated_rmse(trace) -> float:
    return float(np.sum(trace))


def filter_trace(records: list[RunRecord], name: str) -> np.ndarray:
    """RMSE trace over steps 1..N_T for one filter, using only its successful repeats."""
    ok = [r for r in records if name in r.estimates and not r.failed[name]]
    if not ok:
        return np.full(records[0].truth.shape[0] - 1 if records else 0, np.nan)
    return rmse_trace(np.stack([r.truth[1:] for r in ok]), np.stack([r.estimates[name][1:] for r in ok]))


def _run_one_filter(name: str, cfg: ExperimentConfig, model, obs_model, observations, p0: GaussianMixture,
                    guess: np.ndarray, rng: RngStream) -> FilterResult:
    if name == "bsdef":
        return run_filter(model, obs_model, observations, cfg.bsdef_config(), p0, rng)
    if name == "apf":
        params = cfg.apf_params()
        return run_apf(model, obs_model, observations, cfg.dt, p0, params["n_particles"], params["n_aux"], rng)
    if name == "enkf":
        return run_enkf(model, obs_model, observations, cfg.dt, p0, cfg.enkf_params()["n_members"], rng)
    means, _ = kalman_filter(model, obs_model, observations, cfg.dt, guess, cfg.filter_std)
    return FilterResult(means, [])


def run_repeat(cfg: ExperimentConfig, repeat: int) -> RunRecord:
    """Generate one truth and run every configured filter on it."""
    model = cfg.build_model()
    obs_model = cfg.build_observation(model)
    truth_rng = repeat_stream(cfg, repeat, _TRUTH_SLOT)
    truth, observations = generate_truth_and_obs(cfg, truth_rng)
    guess = truth[0] + cfg.guess_std * truth_rng.child(1, INIT).generator().standard_normal(model.d)
    p0 = GaussianMixture.gaussian(guess, cfg.filter_std)

    record = RunRecord(repeat, truth, observations)
    for name in cfg.filters:
        rng = repeat_stream(cfg, repeat, FILTERS.index(name))
        start = time.perf_counter()
        try:
            result = _run_one_filter(name, cfg, model, obs_model, observations, p0, guess, rng)
        except (FilterDivergenceError, FloatingPointError, ModelDomainError, np.linalg.LinAlgError) as exc:
            result = FilterResult(np.empty((0, model.d)), [], True, None, str(exc))
        record.seconds[name] = time.perf_counter() - start
        record.failed[name] = result.failed
        record.messages[name] = result.message
        record.estimates[name] = result.estimates
        if result.failed:
            log.warning("repeat %d: %s failed: %s", repeat, name, result.message)
    return record


@dataclass
class ExperimentResult:
    records: list
    traces: dict
    accumulated: dict
    failures: dict

    def failure_fraction(self, name: str) -> float:
        return self.failures[name] / len(self.records)

    @property
    def exceeded_failure_threshold(self) -> bool:
        return any(self.failure_fraction(n) > FAILURE_THRESHOLD for n in self.failures)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, write: bool = True) -> ExperimentResult:
    """Run every repeat, aggregate RMSE traces and optionally write CSV files.

    Repeats are independent and may run in a process pool (``workers``);
    results are merged by repeat index, so output does not depend on it.
    """
    if cfg.workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(run_repeat, [cfg] * cfg.repeats, range(cfg.repeats)))
    else:
        records = [run_repeat(cfg, r) for r in range(cfg.repeats)]

    traces = {n: filter_trace(records, n) for n in cfg.filters}
    result = ExperimentResult(
        records,
        traces,
        {n: accumulated_rmse(t) for n, t in traces.items()},
        {n: sum(r.failed[n] for r in records) for n in cfg.filters},
    )
    if write:
        write_outputs(cfg, result, Path(out_dir if out_dir is not None else cfg.out_dir))
    return result


# -- output --------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out: Path) -> None:
    """CSV files are a deterministic function of the config; timings go to a separate JSON file."""
    out.mkdir(parents=True, exist_ok=True)
    d = result.records[0].truth.shape[1]
    xcols = [f"x{j}" for j in range(d)]

    def state_rows(get):
        for rec in result.records:
            states = get(rec)
            for n, x in enumerate(states):
                yield [str(rec.repeat), str(n), _fmt(n * cfg.dt), *map(_fmt, x)]

    _write_rows(out / "truth.csv", ["repeat", "step", "time", *xcols], state_rows(lambda r: r.truth))
    for name in cfg.filters:
        _write_rows(out / f"{name}_estimates.csv", ["repeat", "step", "time", *xcols],
                    state_rows(lambda r, name=name: r.estimates[name]))
        _write_rows(out / f"{name}_rmse.csv", ["step", "time", "rmse"],
                    ([str(n), _fmt(n * cfg.dt), _fmt(v)] for n, v in enumerate(result.traces[name], start=1)))
    _write_rows(out / "summary.csv", ["filter", "repeats_ok", "repeats_failed", "accumulated_rmse"],
                ([n, str(len(result.records) - result.failures[n]), str(result.failures[n]),
                  _fmt(result.accumulated[n])] for n in cfg.filters))
    timings = {n: [r.seconds[n] for r in result.records] for n in cfg.filters}
    (out / "timings.json").write_text(json.dumps({"seconds_per_repeat": timings,
                                                  "total_seconds": {n: sum(v) for n, v in timings.items()}},
                                                 indent=2) + "\n")
