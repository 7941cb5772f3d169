"""Fixed-step explicit Runge-Kutta integration of parametric ODEs.

Vector fields are numba-compiled functions with the signature
``rhs(x, u, d, t, p, out)`` that write ``dx/dt`` into ``out``. Here ``u`` is the
input vector, ``d`` a scalar known disturbance, ``t`` the time in minutes and
``p`` the full parameter vector. Optional Jacobians use
``jac(x, u, d, t, p, A_out, B_out)``, where ``A = df/dx`` and ``B = df/du``.

Exogenous signals are sampled once per step at the stage times and handed to
the compiled kernels as arrays. Stages that sit on the right end of a step
(``c == 1``) read the left limit of the signal. This keeps an input that is
piecewise constant on the step grid constant within each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numba as nb
import numpy as np

__all__ = [
    "IntegrationError",
    "VectorField",
    "InputSignal",
    "ConstantSignal",
    "PiecewiseConstantSignal",
    "FunctionSignal",
    "IntegratorConfig",
    "Trajectory",
    "ButcherTableau",
    "RK4",
    "TSIT5",
    "StepPlan",
    "make_plan",
    "run_plan",
    "rk4_step",
    "integrate_flow",
    "tsit54_integrate",
    "propagate_with_sensitivities",
]


class IntegrationError(RuntimeError):
    """A state component became non-finite during integration."""

    def __init__(self, t: float, state: np.ndarray, message: str = ""):
        self.t = float(t)
        self.state = np.array(state, dtype=float)
        super().__init__(message or f"non-finite state at t={self.t:g}: {self.state}")


@dataclass(frozen=True)
class VectorField:
    """Parametric vector field ``f(x, u, d, t; p)`` with optional Jacobians."""

    rhs: Callable
    n_x: int
    n_u: int = 1
    jac: Callable | None = None
    name: str = ""

    def __call__(self, x, u, d: float, t: float, p) -> np.ndarray:
        out = np.empty(self.n_x)
        self.rhs(
            np.asarray(x, dtype=float),
            np.atleast_1d(np.asarray(u, dtype=float)),
            float(d),
            float(t),
            np.asarray(p, dtype=float),
            out,
        )
        return out

    def jacobians(self, x, u, d: float, t: float, p) -> tuple[np.ndarray, np.ndarray]:
        if self.jac is None:
            raise ValueError(f"vector field {self.name!r} has no Jacobian")
        A = np.empty((self.n_x, self.n_x))
        B = np.empty((self.n_x, self.n_u))
        self.jac(
            np.asarray(x, dtype=float),
            np.atleast_1d(np.asarray(u, dtype=float)),
            float(d),
            float(t),
            np.asarray(p, dtype=float),
            A,
            B,
        )
        return A, B


# ----------------------------------------------------------------------------
# Input signals
# ----------------------------------------------------------------------------


class InputSignal:
    """Vector-valued signal on ``[t_start, t_end]``.

    Subclasses implement :meth:`sample`. Evaluation is right-continuous unless
    ``left=True`` is requested, in which case the left limit is returned.
    """

    n: int = 1
    t_start: float = -np.inf
    t_end: float = np.inf

    def sample(self, times: np.ndarray, left: bool = False) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        return self.sample(np.array([float(t)]), left=left)[0]


class ConstantSignal(InputSignal):
    def __init__(self, value, t_start: float = -np.inf, t_end: float = np.inf):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.n = self.value.size
        self.t_start, self.t_end = t_start, t_end

    def sample(self, times, left=False):
        times = np.asarray(times, dtype=float)
        return np.broadcast_to(self.value, (times.size, self.n)).copy()


class PiecewiseConstantSignal(InputSignal):
    """Zero-order hold: ``values[i]`` on ``[breakpoints[i], breakpoints[i+1])``.

    Outside the breakpoints the signal equals ``outside`` (zero by default).
    """

    def __init__(self, breakpoints, values, outside=0.0):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if self.breakpoints.ndim != 1 or len(self.breakpoints) != len(values) + 1:
            raise ValueError("need len(breakpoints) == len(values) + 1")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        self.values = values
        self.n = values.shape[1]
        self.outside = np.broadcast_to(np.asarray(outside, dtype=float), (self.n,))
        self.t_start, self.t_end = float(self.breakpoints[0]), float(self.breakpoints[-1])

    def sample(self, times, left=False):
        times = np.asarray(times, dtype=float)
        side = "left" if left else "right"
        idx = np.searchsorted(self.breakpoints, times, side=side) - 1
        inside = (idx >= 0) & (idx < len(self.values))
        out = np.broadcast_to(self.outside, (times.size, self.n)).copy()
        out[inside] = self.values[idx[inside]]
        return out


class FunctionSignal(InputSignal):
    """Wraps a vectorised ``fn(times, left) -> array`` of shape ``(len, n)``."""

    def __init__(self, fn: Callable[[np.ndarray, bool], np.ndarray], n: int = 1,
                 t_start: float = -np.inf, t_end: float = np.inf):
        self.fn = fn
        self.n = n
        self.t_start, self.t_end = t_start, t_end

    def sample(self, times, left=False):
        out = np.asarray(self.fn(np.asarray(times, dtype=float), left), dtype=float)
        return out.reshape(len(np.atleast_1d(times)), self.n)


# ----------------------------------------------------------------------------
# Configuration and results
# ----------------------------------------------------------------------------


class ButcherTableau(NamedTuple):
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int


RK4 = ButcherTableau(
    "rk4",
    np.array([[0.0, 0.0, 0.0, 0.0],
              [0.5, 0.0, 0.0, 0.0],
              [0.0, 0.5, 0.0, 0.0],
              [0.0, 0.0, 1.0, 0.0]]),
    np.array([1 / 6, 1 / 3, 1 / 3, 1 / 6]),
    np.array([0.0, 0.5, 0.5, 1.0]),
    4,
)

# Tsitouras (2011) 5(4) pair; only the fifth-order weights are used.
_TSIT5_A = np.zeros((7, 7))
_TSIT5_A[1, 0] = 0.161
_TSIT5_A[2, :2] = [-0.008480655492356989, 0.335480655492357]
_TSIT5_A[3, :3] = [2.897153057105493, -6.359448489975075, 4.3622954328695815]
_TSIT5_A[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365,
                   -0.09249506636175525]
_TSIT5_A[5, :5] = [5.86145544294642, -12.92096931784711, 8.159367898576159,
                   -0.071584973281401, -0.028269050394068383]
_TSIT5_A[6, :6] = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
                   -3.290069515436081, 2.324710524099774]
TSIT5 = ButcherTableau(
    "tsit5",
    _TSIT5_A,
    np.append(_TSIT5_A[6, :6], 0.0),
    np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0]),
    5,
)

_SCHEMES = {"rk4": RK4, "tsit5": TSIT5}


@dataclass(frozen=True)
class IntegratorConfig:
    step_size: float = 0.5
    scheme: str = "rk4"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def tableau(self) -> ButcherTableau:
        return _SCHEMES[self.scheme]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states must align")

    def at(self, t: float) -> np.ndarray:
        """State at the recorded time nearest to ``t``."""
        return self.states[int(np.argmin(np.abs(self.times - t)))]


# ----------------------------------------------------------------------------
# Compiled kernels
# ----------------------------------------------------------------------------


@nb.njit(cache=True)
def _stage_state(x, K, A, j, h, out):
    for i in range(x.shape[0]):
        acc = 0.0
        for l in range(j):
            acc += A[j, l] * K[l, i]
        out[i] = x[i] + h * acc


@nb.njit(cache=True)
def _advance(x, K, b, h):
    for i in range(x.shape[0]):
        acc = 0.0
        for l in range(b.shape[0]):
            acc += b[l] * K[l, i]
        x[i] = x[i] + h * acc


@nb.njit(cache=True)
def _finite(x):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]):
            return False
    return True


@nb.njit(cache=True)
def _erk_run(f, A, b, c, x0, times, hs, us, ds, p, rec_idx, out):
    """Integrate and write the state at grid indices ``rec_idx`` into ``out``.

    Returns -1 on success, otherwise the index of the step that produced a
    non-finite state (``x0`` is then overwritten with that state).
    """
    s = b.shape[0]
    n_x = x0.shape[0]
    x = x0.copy()
    K = np.empty((s, n_x))
    tmp = np.empty(n_x)
    r = 0
    n_rec = rec_idx.shape[0]
    while r < n_rec and rec_idx[r] == 0:
        out[r, :] = x
        r += 1
    if r == n_rec:
        return -1
    last = rec_idx[n_rec - 1]
    for k in range(last):
        h = hs[k]
        t = times[k]
        for j in range(s):
            _stage_state(x, K, A, j, h, tmp)
            f(tmp, us[k, j], ds[k, j], t + c[j] * h, p, K[j])
        _advance(x, K, b, h)
        if not _finite(x):
            x0[:] = x
            return k
        while r < n_rec and rec_idx[r] == k + 1:
            out[r, :] = x
            r += 1
    return -1


@nb.njit(cache=True)
def _erk_sens(f, jac, A, b, c, x0, node_steps, times, hs, us, ds, p, states, sens):
    """Forward sensitivities of node states w.r.t. per-interval constant inputs.

    Within each control interval the combined matrix ``M = [dx/dx_n | dx/du_n]``
    is pushed through every RK stage by the chain rule. Node sensitivities then
    follow from ``S_{n+1} = Phi_n S_n`` plus ``Gamma_n`` in the columns of ``u_n``.
    """
    s = b.shape[0]
    n_x = x0.shape[0]
    n_u = us.shape[2]
    m = n_x + n_u
    N = node_steps.shape[0] - 1
    x = x0.copy()
    K = np.empty((s, n_x))
    dK = np.empty((s, n_x, m))
    tmp = np.empty(n_x)
    dtmp = np.empty((n_x, m))
    Aj = np.empty((n_x, n_x))
    Bj = np.empty((n_x, n_u))
    M = np.empty((n_x, m))
    states[0, :] = x
    sens[0, :, :] = 0.0
    for n in range(N):
        M[:, :] = 0.0
        for i in range(n_x):
            M[i, i] = 1.0
        for k in range(node_steps[n], node_steps[n + 1]):
            h = hs[k]
            t = times[k]
            for j in range(s):
                _stage_state(x, K, A, j, h, tmp)
                for i in range(n_x):
                    for q in range(m):
                        acc = 0.0
                        for l in range(j):
                            acc += A[j, l] * dK[l, i, q]
                        dtmp[i, q] = M[i, q] + h * acc
                tj = t + c[j] * h
                f(tmp, us[k, j], ds[k, j], tj, p, K[j])
                jac(tmp, us[k, j], ds[k, j], tj, p, Aj, Bj)
                for i in range(n_x):
                    for q in range(m):
                        acc = 0.0
                        for l in range(n_x):
                            acc += Aj[i, l] * dtmp[l, q]
                        dK[j, i, q] = acc
                    for q in range(n_u):
                        dK[j, i, n_x + q] += Bj[i, q]
            _advance(x, K, b, h)
            for i in range(n_x):
                for q in range(m):
                    acc = 0.0
                    for l in range(s):
                        acc += b[l] * dK[l, i, q]
                    M[i, q] = M[i, q] + h * acc
            if not _finite(x):
                x0[:] = x
                return k
        states[n + 1, :] = x
        for i in range(n_x):
            for q in range(sens.shape[2]):
                acc = 0.0
                for l in range(n_x):
                    acc += M[i, l] * sens[n, l, q]
                sens[n + 1, i, q] = acc
            for q in range(n_u):
                sens[n + 1, i, n * n_u + q] += M[i, n_x + q]
    return -1


# ----------------------------------------------------------------------------
# Step plans
# ----------------------------------------------------------------------------


def _step_grid(t0: float, t1: float, h: float) -> np.ndarray:
    """Grid ``t0, t0+h, ...`` closed by ``t1``; a final shortened step is allowed."""
    if not t1 > t0:
        raise ValueError(f"need t0 < t1, got {t0} and {t1}")
    span = (t1 - t0) / h
    n_full = int(np.floor(span + 1e-9))
    grid = t0 + h * np.arange(n_full + 1)
    if abs(span - round(span)) < 1e-9:
        grid[-1] = t1
    else:
        grid = np.append(grid, t1)
    return grid


@dataclass(frozen=True)
class StepPlan:
    """Time grid plus exogenous signals sampled at every stage time.

    Building a plan once and reusing it is what makes repeated likelihood
    evaluations cheap.
    """

    grid: np.ndarray
    tableau: ButcherTableau
    us: np.ndarray = field(repr=False)
    ds: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.grid[:-1]

    @property
    def hs(self) -> np.ndarray:
        return np.diff(self.grid)

    def snap(self, record_at) -> np.ndarray:
        """Indices of the grid points nearest to each requested time."""
        record_at = np.atleast_1d(np.asarray(record_at, dtype=float))
        if record_at.size and (record_at.min() < self.grid[0] - 1e-9
                               or record_at.max() > self.grid[-1] + 1e-9):
            raise ValueError("record times must lie inside the integration interval")
        pos = np.clip(np.searchsorted(self.grid, record_at), 1, len(self.grid) - 1)
        lower = self.grid[pos - 1]
        upper = self.grid[pos]
        idx = np.where(record_at - lower <= upper - record_at, pos - 1, pos)
        if np.any(np.diff(idx) < 0):
            raise ValueError("record times must be sorted")
        return idx.astype(np.int64)


def make_plan(t0: float, t1: float, cfg: IntegratorConfig, input: InputSignal | None = None,
              disturbance: InputSignal | None = None, n_u: int = 1) -> StepPlan:
    tab = cfg.tableau
    grid = _step_grid(float(t0), float(t1), cfg.step_size)
    times, hs = grid[:-1], np.diff(grid)
    stage_t = times[:, None] + hs[:, None] * tab.c[None, :]
    right_end = tab.c >= 1.0
    flat = stage_t.ravel()
    left = np.tile(right_end, len(times))

    def sample(sig, width):
        if sig is None:
            return np.zeros((flat.size, width))
        vals = sig.sample(flat, left=False)
        if left.any():
            vals[left] = sig.sample(flat[left], left=True)
        return vals

    us = sample(input, n_u if input is None else input.n)
    ds = sample(disturbance, 1)[:, 0]
    us = np.ascontiguousarray(us.reshape(len(times), len(tab.c), -1))
    ds = np.ascontiguousarray(ds.reshape(len(times), len(tab.c)))
    return StepPlan(grid, tab, us, ds)


def run_plan(fieldv: VectorField, plan: StepPlan, x0, params, rec_idx: np.ndarray) -> np.ndarray:
    """Run a prepared plan; returns the states at ``rec_idx``.

    Raises:
        IntegrationError: a state component became NaN or infinite.
    """
    x = np.array(x0, dtype=float)
    rec_idx = np.ascontiguousarray(rec_idx, dtype=np.int64)
    out = np.empty((len(rec_idx), fieldv.n_x))
    tab = plan.tableau
    status = _erk_run(fieldv.rhs, tab.a, tab.b, tab.c, x, plan.times, plan.hs,
                      plan.us, plan.ds, np.asarray(params, dtype=float), rec_idx, out)
    if status >= 0:
        raise IntegrationError(plan.grid[status + 1], x)
    return out


# ----------------------------------------------------------------------------
# Public integration routines
# ----------------------------------------------------------------------------


def rk4_step(fieldv: VectorField, state, t: float, h: float, input: InputSignal | None,
             params, disturbance: InputSignal | None = None) -> np.ndarray:
    """One classical RK4 step of size ``h`` from ``(t, state)``."""
    plan = make_plan(t, t + h, IntegratorConfig(h, "rk4"), input, disturbance, fieldv.n_u)
    return run_plan(fieldv, plan, state, params, np.array([len(plan.grid) - 1]))[0]


def integrate_flow(fieldv: VectorField, x0, params, input: InputSignal | None, t0: float,
                   t1: float, cfg: IntegratorConfig = IntegratorConfig(),
                   record_at: Sequence[float] | np.ndarray | None = None,
                   disturbance: InputSignal | None = None) -> Trajectory:
    """Integrate ``x' = f(x, u(t), d(t), t; p)`` from ``x(t0) = x0`` to ``t1``.

    Requested times are snapped to the nearest grid point. With
    ``record_at=None`` every grid point is returned.
    """
    plan = make_plan(t0, t1, cfg, input, disturbance, fieldv.n_u)
    if record_at is None:
        idx = np.arange(len(plan.grid), dtype=np.int64)
    else:
        idx = plan.snap(record_at)
    states = run_plan(fieldv, plan, x0, params, idx)
    return Trajectory(plan.grid[idx], states)


def tsit54_integrate(fieldv: VectorField, x0, params, input: InputSignal | None, t0: float,
                     t1: float, h: float = 0.1, record_at=None,
                     disturbance: InputSignal | None = None) -> Trajectory:
    """Fixed-step Tsitouras 5(4) integration, used for ground-truth simulation."""
    return integrate_flow(fieldv, x0, params, input, t0, t1, IntegratorConfig(h, "tsit5"),
                          record_at, disturbance)


def propagate_with_sensitivities(fieldv: VectorField, x0, params, controls, nodes,
                                 cfg: IntegratorConfig = IntegratorConfig(),
                                 disturbance: InputSignal | None = None,
                                 plan: StepPlan | None = None,
                                 ) -> tuple[np.ndarray, np.ndarray]:
    """Node states and their exact derivatives w.r.t. every control value.

    Args:
        controls: ``(N, n_u)`` (or ``(N,)``) piecewise-constant inputs, one per
            interval ``[nodes[n], nodes[n+1])``.
        nodes: ``N + 1`` control-grid times; every interval must be a whole
            number of integrator steps.
        plan: optional pre-built plan over ``[nodes[0], nodes[-1]]`` whose
            input samples are overwritten with ``controls``.

    Returns:
        ``states`` of shape ``(N+1, n_x)`` and ``sens`` of shape
        ``(N+1, n_x, N*n_u)`` with ``sens[k, :, n*n_u + j] = d x_k / d u_n[j]``.
    """
    if fieldv.jac is None:
        raise ValueError("sensitivities need a vector field with a Jacobian")
    controls = np.asarray(controls, dtype=float).reshape(len(nodes) - 1, -1)
    if plan is None:
        plan = control_plan(nodes, cfg, disturbance, controls.shape[1])
    node_steps = _node_steps(plan, nodes)
    us = np.ascontiguousarray(np.repeat(controls, np.diff(node_steps), axis=0)[:, None, :]
                              .repeat(len(plan.tableau.c), axis=1))
    N = len(nodes) - 1
    states = np.empty((N + 1, fieldv.n_x))
    sens = np.empty((N + 1, fieldv.n_x, N * controls.shape[1]))
    x = np.array(x0, dtype=float)
    tab = plan.tableau
    status = _erk_sens(fieldv.rhs, fieldv.jac, tab.a, tab.b, tab.c, x, node_steps,
                       plan.times, plan.hs, us, plan.ds, np.asarray(params, dtype=float),
                       states, sens)
    if status >= 0:
        raise IntegrationError(plan.grid[status + 1], x)
    return states, sens


def control_plan(nodes, cfg: IntegratorConfig, disturbance: InputSignal | None,
                 n_u: int = 1) -> StepPlan:
    """Plan over a control grid; inputs are filled in per call."""
    nodes = np.asarray(nodes, dtype=float)
    plan = make_plan(nodes[0], nodes[-1], cfg, None, disturbance, n_u)
    _node_steps(plan, nodes)
    return plan


def _node_steps(plan: StepPlan, nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    idx = np.searchsorted(plan.grid, nodes - 1e-9)
    idx = np.clip(idx, 0, len(plan.grid) - 1)
    if not np.allclose(plan.grid[idx], nodes, atol=1e-9, rtol=0):
        raise ValueError("control nodes must lie on the integrator step grid")
    return idx.astype(np.int64)
