"""Latent samples, priors and the parametric state-space model wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ode import InputSignal, VectorField

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LatentSample:
    """One hypothesis ``z = (theta, x(t_ref))`` about parameters and state."""

    theta: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).ravel())

    def to_unconstrained(self) -> np.ndarray:
        """Map to the random-walk coordinates ``(log theta, x)``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.concatenate([np.log(self.theta), self.x0])

    @classmethod
    def from_unconstrained(cls, w: np.ndarray, n_theta: int) -> LatentSample:
        return cls(np.exp(w[:n_theta]), w[n_theta:])


@dataclass(frozen=True)
class PriorSpec:
    """Independent lognormal priors on parameters, Gaussian priors on the state."""

    log_mu: np.ndarray
    log_sigma: np.ndarray
    state_mu: np.ndarray
    state_sigma: np.ndarray
    theta_names: tuple[str, ...] = ()
    state_names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("log_mu", "log_sigma", "state_mu", "state_sigma"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if len(self.log_mu) != len(self.log_sigma) or len(self.state_mu) != len(self.state_sigma):
            raise ValueError("prior location and scale vectors must have equal length")
        if np.any(self.log_sigma <= 0) or np.any(self.state_sigma <= 0):
            raise ValueError("prior scales must be positive")

    @property
    def n_theta(self) -> int:
        return len(self.log_mu)

    @property
    def n_x(self) -> int:
        return len(self.state_mu)

    @property
    def dim(self) -> int:
        return self.n_theta + self.n_x

    def median(self) -> LatentSample:
        return LatentSample(np.exp(self.log_mu), self.state_mu)

    def unconstrained_scale(self) -> np.ndarray:
        return np.concatenate([self.log_sigma, self.state_sigma])


def sample_prior(prior: PriorSpec, rng: np.random.Generator) -> LatentSample:
    """Draw ``theta`` from the lognormals and ``x(-T)`` from the Gaussians."""
    log_theta = rng.normal(prior.log_mu, prior.log_sigma)
    x0 = rng.normal(prior.state_mu, prior.state_sigma)
    return LatentSample(np.exp(log_theta), x0)


def prior_logdensity(z: LatentSample, prior: PriorSpec) -> float:
    """Log prior density of ``z`` with respect to Lebesgue measure on ``(theta, x)``.

    Returns ``-inf`` when any parameter is not strictly positive.
    """
    theta = z.theta
    if np.any(~(theta > 0)):
        return -np.inf
    lt = np.log(theta)
    rt = (lt - prior.log_mu) / prior.log_sigma
    rx = (z.x0 - prior.state_mu) / prior.state_sigma
    lp_theta = np.sum(-0.5 * rt**2 - np.log(prior.log_sigma) - _LOG_SQRT_2PI - lt)
    lp_x = np.sum(-0.5 * rx**2 - np.log(prior.state_sigma) - _LOG_SQRT_2PI)
    return float(lp_theta + lp_x)


@dataclass(frozen=True)
class StateSpaceModel:
    """A vector field whose parameter vector is partly inferred.

    ``base_params`` is the full vector passed to the field; the entries at
    ``theta_index`` are replaced by the inferred parameters. Only the state
    component ``observed`` is measured, with additive Gaussian noise.
    """

    field: VectorField
    base_params: np.ndarray
    theta_index: tuple[int, ...]
    observed: int = 0
    state_names: tuple[str, ...] = ()
    theta_names: tuple[str, ...] = ()

    def params(self, theta) -> np.ndarray:
        p = np.array(self.base_params, dtype=float)
        if self.theta_index:
            p[list(self.theta_index)] = theta
        return p


@dataclass(frozen=True)
class Dataset:
    """Known input and disturbance on ``[t_start, t_end]`` plus noisy outputs."""

    input: InputSignal | None
    times: np.ndarray
    outputs: np.ndarray
    noise_sigma: float
    t_start: float
    t_end: float = 0.0
    disturbance: InputSignal | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "outputs", np.asarray(self.outputs, dtype=float))
        if self.times.shape != self.outputs.shape:
            raise ValueError("one output per measurement time")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("measurement times must be sorted")
        if self.times.size and (self.times[0] < self.t_start or self.times[-1] > self.t_end):
            raise ValueError("measurement times must lie in the training window")

    @property
    def M(self) -> int:
        return len(self.times)

    def prefix(self, m: int) -> Dataset:
        """The first ``m`` measurements in time order."""
        return Dataset(self.input, self.times[:m], self.outputs[:m], self.noise_sigma,
                       self.t_start, self.t_end, self.disturbance)
