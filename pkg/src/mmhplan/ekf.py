"""Continuous-discrete extended Kalman filter and the nominal-model planner.

The mean is propagated with the same RK4 scheme as the sampler. The covariance
follows ``P <- F P F^T + Q h`` with ``F = I + h A(x)`` on every sub-step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .model import Dataset, LatentSample, PriorSpec, StateSpaceModel
from .ocp import ControlGrid, ControlTrajectory, OcpSpec, Scenario, ScenarioProblem, SolverConfig, SolveReport, solve_ocp
from .ode import InputSignal, IntegrationError, IntegratorConfig, _advance, _finite, _stage_state, make_plan

DEFAULT_Q_RATE = (1e-2, 1e-8, 1e-2)


@dataclass
class EkfState:
    mean: np.ndarray
    cov: np.ndarray
    t: float

    def copy(self) -> EkfState:
        return EkfState(self.mean.copy(), self.cov.copy(), self.t)


@dataclass(frozen=True)
class EkfConfig:
    q_rate: tuple[float, ...] = DEFAULT_Q_RATE
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    @property
    def Q(self) -> np.ndarray:
        return np.diag(np.asarray(self.q_rate, dtype=float))


@nb.njit(cache=True)
def _ekf_predict(f, jac, A, b, c, x, P, Q, times, hs, us, ds, p):
    s = b.shape[0]
    n = x.shape[0]
    K = np.empty((s, n))
    tmp = np.empty(n)
    J = np.empty((n, n))
    B = np.empty((n, us.shape[2]))
    F = np.empty((n, n))
    for k in range(times.shape[0]):
        h = hs[k]
        t = times[k]
        jac(x, us[k, 0], ds[k, 0], t, p, J, B)
        for i in range(n):
            for j in range(n):
                F[i, j] = h * J[i, j]
            F[i, i] += 1.0
        for j in range(s):
            _stage_state(x, K, A, j, h, tmp)
            f(tmp, us[k, j], ds[k, j], t + c[j] * h, p, K[j])
        _advance(x, K, b, h)
        if not _finite(x):
            return k
        FP = F @ P
        Pn = FP @ F.T + Q * h
        for i in range(n):
            for j in range(n):
                P[i, j] = 0.5 * (Pn[i, j] + Pn[j, i])
    return -1


def ekf_predict(ekf: EkfState, model: StateSpaceModel, params, input: InputSignal | None,
                t_to: float, Q_rate, cfg: IntegratorConfig = IntegratorConfig(),
                disturbance: InputSignal | None = None) -> EkfState:
    """Propagate mean and covariance from ``ekf.t`` to ``t_to``.

    ``Q_rate`` is a diffusion matrix or the vector of its diagonal.
    """
    if t_to < ekf.t - 1e-12:
        raise ValueError("cannot predict backwards in time")
    if t_to - ekf.t <= 1e-12:
        return ekf.copy()
    f = model.field
    if f.jac is None:
        raise ValueError("EKF needs a vector field with a Jacobian")
    plan = make_plan(ekf.t, t_to, cfg, input, disturbance, f.n_u)
    x = ekf.mean.astype(float).copy()
    P = ekf.cov.astype(float).copy()
    Q = np.asarray(Q_rate, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    tab = plan.tableau
    status = _ekf_predict(f.rhs, f.jac, tab.a, tab.b, tab.c, x, P, Q,
                          plan.times, plan.hs, plan.us, plan.ds, np.asarray(params, dtype=float))
    if status >= 0:
        raise IntegrationError(plan.grid[status + 1], x)
    return EkfState(x, P, float(t_to))


def ekf_update(ekf: EkfState, y: float, sigma: float, observed: int = 0) -> EkfState:
    """Scalar measurement update of state component ``observed`` (Joseph form)."""
    n = len(ekf.mean)
    H = np.zeros(n)
    H[observed] = 1.0
    P = ekf.cov
    R = float(sigma) ** 2
    S = float(H @ P @ H) + R
    if not S > 0:
        raise FloatingPointError(f"innovation variance {S} is not positive")
    if not np.isfinite(S):
        return ekf.copy()
    gain = P @ H / S
    mean = ekf.mean + gain * (y - ekf.mean[observed])
    IKH = np.eye(n) - np.outer(gain, H)
    cov = IKH @ P @ IKH.T + R * np.outer(gain, gain)
    return EkfState(mean, 0.5 * (cov + cov.T), ekf.t)


def ekf_initial(prior: PriorSpec, t: float) -> EkfState:
    return EkfState(prior.state_mu.copy(), np.diag(prior.state_sigma**2), float(t))


def ekf_filter(dataset: Dataset, model: StateSpaceModel, params, prior: PriorSpec,
               cfg: EkfConfig = EkfConfig()) -> tuple[EkfState, list[tuple[float, np.ndarray, np.ndarray]]]:
    """Filter through every measurement and predict to the end of the window.

    Returns the final state and a trace of ``(t, mean, diag(P))`` after each update.
    """
    ekf = ekf_initial(prior, dataset.t_start)
    trace = [(ekf.t, ekf.mean.copy(), np.diag(ekf.cov).copy())]
    for t_m, y in zip(dataset.times, dataset.outputs):
        ekf = ekf_predict(ekf, model, params, dataset.input, t_m, cfg.Q, cfg.integrator,
                          dataset.disturbance)
        ekf = ekf_update(ekf, y, dataset.noise_sigma, model.observed)
        trace.append((ekf.t, ekf.mean.copy(), np.diag(ekf.cov).copy()))
    ekf = ekf_predict(ekf, model, params, dataset.input, dataset.t_end, cfg.Q, cfg.integrator,
                      dataset.disturbance)
    trace.append((ekf.t, ekf.mean.copy(), np.diag(ekf.cov).copy()))
    return ekf, trace


def nominal_plan(dataset: Dataset, model: StateSpaceModel, theta, prior: PriorSpec, spec: OcpSpec,
                 grid: ControlGrid, solver: SolverConfig = SolverConfig(),
                 ekf_cfg: EkfConfig = EkfConfig(), disturbance: InputSignal | None = None,
                 ) -> tuple[ControlTrajectory, SolveReport, EkfState]:
    """EKF state estimate under fixed parameters, then a one-scenario OCP."""
    params = model.params(theta)
    ekf, _ = ekf_filter(dataset, model, params, prior, ekf_cfg)
    problem = ScenarioProblem(model, [Scenario(np.asarray(theta, dtype=float), ekf.mean, 0)], grid,
                              spec, ekf_cfg.integrator, disturbance)
    u, report = solve_ocp(problem, solver)
    return u, report, ekf


def as_latent(ekf: EkfState, theta) -> LatentSample:
    return LatentSample(theta, ekf.mean)
