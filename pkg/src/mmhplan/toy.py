"""Linear-Gaussian toy problem with a closed-form posterior, for checking the sampler.

A single constant state ``x' = 0`` is observed directly with Gaussian noise
under a Gaussian prior, so the posterior of ``x`` is Gaussian and known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import Dataset, PriorSpec, StateSpaceModel
from .ode import VectorField


@nb.njit(cache=True)
def _still(x, u, d, t, p, out):
    for i in range(out.shape[0]):
        out[i] = 0.0


@nb.njit(cache=True)
def _still_jac(x, u, d, t, p, A, B):
    A[:, :] = 0.0
    B[:, :] = 0.0


CONSTANT = VectorField(_still, n_x=1, n_u=1, jac=_still_jac, name="constant")


@dataclass(frozen=True)
class ConjugateProblem:
    model: StateSpaceModel
    prior: PriorSpec
    dataset: Dataset
    x_true: float

    def posterior(self) -> tuple[float, float]:
        """Closed-form posterior mean and variance of ``x``."""
        return conjugate_posterior(self.dataset.outputs, float(self.prior.state_mu[0]),
                                   float(self.prior.state_sigma[0]), self.dataset.noise_sigma)


def conjugate_posterior(y, mu0: float, sigma0: float, sigma: float) -> tuple[float, float]:
    y = np.asarray(y, dtype=float)
    precision = 1.0 / sigma0**2 + y.size / sigma**2
    mean = (mu0 / sigma0**2 + y.sum() / sigma**2) / precision
    return float(mean), float(1.0 / precision)


def conjugate_problem(rng: np.random.Generator, mu0: float = 0.0, sigma0: float = 2.0,
                      sigma: float = 1.0, M: int = 10, t_start: float = -10.0) -> ConjugateProblem:
    """Draw ``x`` from the prior and ``M`` noisy readings of it on ``[t_start, 0]``."""
    x = rng.normal(mu0, sigma0)
    times = np.sort(rng.uniform(t_start, 0.0, M))
    times = np.round(times * 2.0) / 2.0
    y = x + sigma * rng.standard_normal(M)
    model = StateSpaceModel(CONSTANT, np.zeros(0), (), observed=0, state_names=("x",))
    prior = PriorSpec(np.zeros(0), np.zeros(0), [mu0], [sigma0], (), ("x",))
    return ConjugateProblem(model, prior, Dataset(None, times, y, sigma, t_start, 0.0), float(x))
