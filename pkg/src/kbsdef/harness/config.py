"""Experiment configuration read from INI files.

Grammar (``configparser``; keys are case-insensitive, ``#`` and ``;`` start comments)::

    [experiment]
    name = lorenz96_cubic        # identifier, also mixed into seeds
    T = 1.0                      # horizon; must equal steps * dt within 1e-9
    dt = 0.02                    # observation gap
    steps = 50                   # N_T
    repeats = 10
    seed = 0
    truth_substeps = 10          # Euler sub-steps per gap for the truth
    filters = bsdef, apf, enkf   # any of bsdef, apf, enkf, kalman
    workers = 1                  # process pool size for repeats

    [model]
    name = lorenz96              # see ``list-models``
    <parameter> = <value>        # model keyword arguments

    [observation]
    name = cubic-root
    std = 0.1

    [initial]
    truth_mean = 2.0             # scalar or comma-separated vector
    truth_std = 4.0              # truth S0 ~ N(truth_mean, truth_std^2)
    guess_std = 0.5              # filter guess = S0 + N(0, guess_std^2)
    filter_std = 0.5             # filter prior N(guess, filter_std^2)

    [bsdef]                      # any BsdefConfig field except dt and seed
    [apf]                        # n_particles, n_aux
    [enkf]                       # n_members

    [output]
    dir = results/lorenz96_cubic
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bsdef import BsdefConfig
from ..models import MODELS, OBSERVATIONS, ObservationModel, StateModel, build_model, build_observation

FILTERS = ("bsdef", "apf", "enkf", "kalman")
_BSDEF_FIELDS = {f.name: f.type for f in dataclasses.fields(BsdefConfig) if f.name not in ("dt", "seed")}
_APF_DEFAULTS = {"n_particles": 500, "n_aux": 10}
_ENKF_DEFAULTS = {"n_members": 1000}


class ConfigError(ValueError):
    """The configuration cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model_name: str
    obs_name: str
    obs_std: float
    T: float
    dt: float
    n_steps: int
    model_params: dict = field(default_factory=dict)
    repeats: int = 1
    seed: int = 0
    truth_substeps: int = 10
    filters: tuple = ("bsdef", "apf", "enkf")
    truth_mean: tuple = (0.0,)
    truth_std: float = 0.0
    guess_std: float = 0.0
    filter_std: float = 1.0
    bsdef: dict = field(default_factory=dict)
    apf: dict = field(default_factory=lambda: dict(_APF_DEFAULTS))
    enkf: dict = field(default_factory=lambda: dict(_ENKF_DEFAULTS))
    out_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.model_name not in MODELS:
            raise ConfigError(f"unknown model {self.model_name!r}; choose from {sorted(MODELS)}")
        if self.obs_name not in OBSERVATIONS:
            raise ConfigError(f"unknown observation {self.obs_name!r}; choose from {sorted(OBSERVATIONS)}")
        if not (self.dt > 0 and self.T >= 0):
            raise ConfigError("dt must be positive and T nonnegative")
        if self.n_steps < 0:
            raise ConfigError("steps must be nonnegative")
        if abs(self.n_steps * self.dt - self.T) > 1e-9:
            raise ConfigError(f"steps * dt = {self.n_steps * self.dt!r} does not match T = {self.T!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.truth_substeps < 1 or self.workers < 1:
            raise ConfigError("truth_substeps and workers must be at least 1")
        if not self.filters or any(f not in FILTERS for f in self.filters):
            raise ConfigError(f"filters must be a nonempty subset of {FILTERS}")
        if len(set(self.filters)) != len(self.filters):
            raise ConfigError("filters are listed more than once")
        if self.obs_std < 0 or self.truth_std < 0 or self.guess_std < 0 or not self.filter_std > 0:
            raise ConfigError("noise scales must be nonnegative and filter_std positive")
        unknown = set(self.bsdef) - set(_BSDEF_FIELDS)
        if unknown:
            raise ConfigError(f"unknown [bsdef] keys: {sorted(unknown)}")
        for section, allowed in (("apf", _APF_DEFAULTS), ("enkf", _ENKF_DEFAULTS)):
            unknown = set(getattr(self, section)) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown [{section}] keys: {sorted(unknown)}")
        try:
            model = self.build_model()
            self.build_observation(model)
            self.bsdef_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.truth_mean) not in (1, model.d):
            raise ConfigError(f"truth_mean needs 1 or {model.d} entries")
        if "kalman" in self.filters and (model.name != "ou" or self.obs_name != "linear"):
            raise ConfigError("the kalman filter needs the 'ou' model with linear observations")

    def build_model(self) -> StateModel:
        return build_model(self.model_name, self.model_params)

    def build_observation(self, model: StateModel | None = None) -> ObservationModel:
        d = (model or self.build_model()).d
        return build_observation(self.obs_name, d, self.obs_std)

    def bsdef_config(self) -> BsdefConfig:
        return BsdefConfig(dt=self.dt, seed=self.seed, **self.bsdef)

    def apf_params(self) -> dict:
        return {**_APF_DEFAULTS, **self.apf}

    def enkf_params(self) -> dict:
        return {**_ENKF_DEFAULTS, **self.enkf}

    def initial_mean(self, d: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.truth_mean, dtype=float), (d,)).copy()

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _number(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return float(text)
    except ValueError:
        return text


def _typed(section: str, key: str, raw: str):
    if section == "bsdef":
        kind = _BSDEF_FIELDS[key]
        if "bool" in kind:
            return _number(raw) is True
        if kind == "str":
            return raw.strip()
        if "float" in kind:
            return None if raw.strip().lower() == "none" else float(raw)
        return int(raw)
    if section in ("apf", "enkf"):
        return int(raw)
    return _number(raw)


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
        exp = parser["experiment"]
        model = dict(parser["model"])
        obs = parser["observation"]
        init = parser["initial"] if parser.has_section("initial") else {}
        sections = {}
        for name in ("bsdef", "apf", "enkf"):
            raw = dict(parser[name]) if parser.has_section(name) else {}
            if name == "bsdef" and set(raw) - set(_BSDEF_FIELDS):
                raise ConfigError(f"unknown [bsdef] keys: {sorted(set(raw) - set(_BSDEF_FIELDS))}")
            sections[name] = {k: _typed(name, k, v) for k, v in raw.items()}
        out = parser.get("output", "dir", fallback="results")
        cfg = ExperimentConfig(
            name=exp.get("name", "experiment").strip(),
            model_name=model.pop("name").strip(),
            model_params={k: _number(v) for k, v in model.items()},
            obs_name=obs["name"].strip(),
            obs_std=float(obs["std"]),
            T=float(exp["T"]),
            dt=float(exp["dt"]),
            n_steps=int(exp["steps"]),
            repeats=int(exp.get("repeats", "1")),
            seed=int(exp.get("seed", "0")),
            truth_substeps=int(exp.get("truth_substeps", "10")),
            filters=tuple(f.strip() for f in exp.get("filters", "bsdef,apf,enkf").split(",") if f.strip()),
            workers=int(exp.get("workers", "1")),
            truth_mean=tuple(float(v) for v in init.get("truth_mean", "0").split(",")),
            truth_std=float(init.get("truth_std", "0")),
            guess_std=float(init.get("guess_std", "0")),
            filter_std=float(init.get("filter_std", "1")),
            bsdef=sections["bsdef"],
            apf=sections["apf"],
            enkf=sections["enkf"],
            out_dir=str(Path(base_dir) / out) if not Path(out).is_absolute() else out,
        )
    except ConfigError:
        raise
    except (configparser.Error, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config file; a relative output directory is kept relative to the working directory."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
