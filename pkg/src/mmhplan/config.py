"""Experiment configuration and its TOML representation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .ekf import DEFAULT_Q_RATE, EkfConfig
from .glucose import (
    DEFAULT_MEALS,
    GLUCOSE_PRIOR,
    HORIZON,
    MEAL_DECAY,
    STATE_NAMES,
    T_TRAIN,
    THETA_NAMES,
    TRAINING_GAIN,
    TRUTH_STEP,
    MealSchedule,
)
from .mmh import ChainConfig
from .model import PriorSpec
from .ocp import ControlGrid, OcpSpec, SolverConfig
from .ode import IntegratorConfig


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass(frozen=True)
class PriorConfig:
    log_mu: tuple[float, ...] = tuple(GLUCOSE_PRIOR.log_mu.tolist())
    log_sigma: tuple[float, ...] = tuple(GLUCOSE_PRIOR.log_sigma.tolist())
    state_mu: tuple[float, ...] = tuple(GLUCOSE_PRIOR.state_mu.tolist())
    state_sigma: tuple[float, ...] = tuple(GLUCOSE_PRIOR.state_sigma.tolist())

    def build(self) -> PriorSpec:
        if len(self.log_mu) != 3 or len(self.state_mu) != 3:
            raise ConfigError("the glucose prior needs three parameters and three states")
        try:
            return PriorSpec(self.log_mu, self.log_sigma, self.state_mu, self.state_sigma,
                             THETA_NAMES, STATE_NAMES)
        except ValueError as err:
            raise ConfigError(f"prior: {err}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a study from a master seed."""

    seed: int = 0
    meals: tuple[tuple[float, float], ...] = DEFAULT_MEALS.meals
    meal_decay: float = MEAL_DECAY
    training_gain: float = TRAINING_GAIN
    noise_sigma: float = 8.0
    n_measurements: int = 200
    training_window: float = T_TRAIN
    horizon: float = HORIZON
    control_spacing: float = 5.0
    truth_step: float = TRUTH_STEP
    prior: PriorConfig = field(default_factory=PriorConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    ocp: OcpSpec = field(default_factory=OcpSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ekf_q_rate: tuple[float, ...] = DEFAULT_Q_RATE
    runs: int = 20
    workers: int = 1
    acf_samples: int = 20000
    acf_max_lag: int = 50
    envelope_slack: float = 5.0
    out_dir: str = "out"

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("run count must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.n_measurements < 1 or not self.noise_sigma > 0:
            raise ConfigError("need at least one measurement and a positive noise level")
        if not (self.training_window > 0 and self.horizon > 0 and self.truth_step > 0):
            raise ConfigError("time spans and steps must be positive")
        if self.training_gain < 0:
            raise ConfigError("training gain must be non-negative")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.acf_samples <= self.acf_max_lag:
            raise ConfigError("acf_samples must exceed acf_max_lag")
        self.schedule()
        self.grid()
        self.prior.build()

    def schedule(self) -> MealSchedule:
        try:
            return MealSchedule(self.meals, self.meal_decay)
        except ValueError as err:
            raise ConfigError(f"meals: {err}") from None

    def grid(self) -> ControlGrid:
        try:
            return ControlGrid.uniform(self.horizon, self.control_spacing)
        except ValueError as err:
            raise ConfigError(f"control grid: {err}") from None

    @property
    def ekf(self) -> EkfConfig:
        return EkfConfig(self.ekf_q_rate, self.integrator)

    def full_scale(self) -> ExperimentConfig:
        """100 runs with 100 scenarios and a 10^5-sample ACF chain."""
        return dataclasses.replace(self, runs=100, acf_samples=100_000,
                                   chain=dataclasses.replace(self.chain, K=100))

    # -- serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = dict(data)
        nested = {"prior": PriorConfig, "integrator": IntegratorConfig, "chain": ChainConfig,
                  "ocp": OcpSpec, "solver": SolverConfig}
        try:
            for key, typ in nested.items():
                if key in data:
                    data[key] = _build(typ, data[key])
            return _build(cls, data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"malformed TOML: {err}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.loads(Path(path).read_text())


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(typ, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{typ.__name__}: expected a table")
    known = {f.name: f for f in dataclasses.fields(typ)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{typ.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        value = _tupled(value)
        # TOML integers are valid where floats are expected
        if known[name].type == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return typ(**kwargs)
