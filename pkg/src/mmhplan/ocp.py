"""Scenario-based optimal control by direct single shooting.

Decision variables are the piecewise-constant inputs ``u_0..u_{N-1}``. Every
scenario is rolled out under the same inputs with RK4. The averaged tracking
cost is minimised subject to state bounds at every node of every scenario.
State bounds are handled by an augmented Lagrangian. Input bounds are
enforced exactly by projection inside a limited-memory quasi-Newton solver.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import LatentSample, StateSpaceModel
from .ode import (
    InputSignal,
    IntegrationError,
    IntegratorConfig,
    PiecewiseConstantSignal,
    _erk_sens,
    _node_steps,
    control_plan,
    integrate_flow,
)

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The inner iteration produced a non-finite merit value."""


@dataclass(frozen=True)
class ControlGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("control nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float = 360.0, spacing: float = 5.0, start: float = 0.0) -> ControlGrid:
        n = int(round(horizon / spacing))
        return cls(start + spacing * np.arange(n + 1))

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1] - self.nodes[0])


@dataclass(frozen=True)
class ControlTrajectory:
    values: np.ndarray
    grid: ControlGrid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if len(values) != self.grid.N:
            raise ValueError("one input value per control interval")
        object.__setattr__(self, "values", values)

    def signal(self) -> PiecewiseConstantSignal:
        return PiecewiseConstantSignal(self.grid.nodes, self.values)


@dataclass(frozen=True)
class OcpSpec:
    """Quadratic tracking of one state component with bounds on it.

    ``running = w_state (x_i - ref)^2 + w_input u^2``, ``terminal =
    w_terminal (x_i - ref)^2`` and ``state_lower <= x_i <= state_upper``.
    The defaults are the glucose instance.
    """

    state_index: int = 0
    ref: float = 80.0
    w_state: float = 1.0
    w_terminal: float = 10.0
    w_input: float = 1e-4
    state_lower: float = 70.0
    state_upper: float = 180.0
    u_lower: float = 0.0
    u_upper: float = 20.0

    def __post_init__(self):
        if min(self.w_state, self.w_terminal, self.w_input) < 0:
            raise ValueError("weights must be non-negative")
        if not (self.state_lower <= self.state_upper and self.u_lower <= self.u_upper):
            raise ValueError("bounds must be ordered")


@dataclass(frozen=True)
class Scenario:
    theta: np.ndarray
    x0: np.ndarray
    index: int = 0


@dataclass(frozen=True)
class SolverConfig:
    rho0: float = 10.0
    rho_max: float = 1e8
    rho_growth: float = 10.0
    shrink_factor: float = 0.25
    max_outer: int = 40
    max_inner: int = 300
    gtol: float = 1e-5
    ftol: float = 1e-13
    feas_tol: float = 1e-6
    # internal back-off from the state bounds so that hard residuals reach feas_tol
    margin: float = 1e-3
    memory: int = 10
    rtol_cost: float = 1e-8
    # give up once rho is saturated and the violation stops improving
    stall_outer: int = 3
    stall_rtol: float = 1e-2


@dataclass
class SolveReport:
    success: bool
    cost: float
    max_violation: float
    outer_iterations: int
    inner_iterations: int
    message: str = ""
    merit_history: list[list[float]] = field(default_factory=list, repr=False)


def scenarios_from(samples, start: int = 0) -> list[Scenario]:
    """Wrap ``LatentSample``s (or a ``PosteriorSampleSet``) as indexed scenarios."""
    return [Scenario(np.asarray(z.theta), np.asarray(z.x0), start + i) for i, z in enumerate(samples)]


class ScenarioProblem:
    """Discretised scenario OCP: rollouts, cost, constraints and exact gradients."""

    def __init__(self, model: StateSpaceModel, scenarios: list[Scenario], grid: ControlGrid,
                 spec: OcpSpec = OcpSpec(), cfg: IntegratorConfig = IntegratorConfig(),
                 disturbance: InputSignal | None = None):
        if not scenarios:
            raise ValueError("need at least one scenario")
        self.model, self.scenarios, self.grid, self.spec, self.cfg = model, scenarios, grid, spec, cfg
        self.disturbance = disturbance
        self.plan = control_plan(grid.nodes, cfg, disturbance, model.field.n_u)
        self.node_steps = _node_steps(self.plan, grid.nodes)
        self._steps_per_interval = np.diff(self.node_steps)
        self.params = [model.params(s.theta) for s in scenarios]

    @property
    def K(self) -> int:
        return len(self.scenarios)

    def _inputs(self, u: np.ndarray) -> np.ndarray:
        per_step = np.repeat(np.asarray(u, dtype=float).reshape(self.grid.N, -1),
                             self._steps_per_interval, axis=0)
        s = len(self.plan.tableau.c)
        return np.ascontiguousarray(np.repeat(per_step[:, None, :], s, axis=1))

    def propagate(self, u) -> tuple[np.ndarray, np.ndarray]:
        """Node states ``(K, N+1, n_x)`` and sensitivities ``(K, N+1, n_x, N*n_u)``."""
        f = self.model.field
        us = self._inputs(u)
        N = self.grid.N
        tab = self.plan.tableau
        states = np.empty((self.K, N + 1, f.n_x))
        sens = np.empty((self.K, N + 1, f.n_x, N * f.n_u))
        for k, sc in enumerate(self.scenarios):
            x = np.array(sc.x0, dtype=float)
            status = _erk_sens(f.rhs, f.jac, tab.a, tab.b, tab.c, x, self.node_steps,
                               self.plan.times, self.plan.hs, us, self.plan.ds,
                               self.params[k], states[k], sens[k])
            if status >= 0:
                raise IntegrationError(self.plan.grid[status + 1], x,
                                       f"scenario {sc.index}: non-finite state")
        return states, sens

    def rollout(self, u, k: int = 0) -> np.ndarray:
        """Node states ``x_0..x_N`` of scenario ``k`` under inputs ``u``."""
        sc = self.scenarios[k]
        sig = PiecewiseConstantSignal(self.grid.nodes, np.asarray(u, dtype=float).reshape(self.grid.N, -1))
        try:
            tr = integrate_flow(self.model.field, sc.x0, self.params[k], sig, self.grid.nodes[0],
                                self.grid.nodes[-1], self.cfg, self.grid.nodes, self.disturbance)
        except IntegrationError as err:
            raise IntegrationError(err.t, err.state, f"scenario {sc.index}: {err}") from None
        return tr.states

    def cost_terms(self, states, u):
        sp = self.spec
        e = states[:, :, sp.state_index] - sp.ref
        d = self.grid.deltas
        per = sp.w_terminal * e[:, -1] ** 2 + (sp.w_state * e[:, :-1] ** 2) @ d
        return float(np.mean(per)) + sp.w_input * float(np.asarray(u) ** 2 @ d)

    def cost(self, u) -> float:
        states = np.stack([self.rollout(u, k) for k in range(self.K)])
        return self.cost_terms(states, u)

    def constraint_residuals(self, u, states=None) -> np.ndarray:
        """``[lower - x_i, x_i - upper]`` at every node of every scenario, shape ``(K, N+1, 2)``."""
        if states is None:
            states = np.stack([self.rollout(u, k) for k in range(self.K)])
        xi = states[:, :, self.spec.state_index]
        return np.stack([self.spec.state_lower - xi, xi - self.spec.state_upper], axis=-1)

    def evaluate(self, u, lam=None, rho: float = 0.0, margin: float = 0.0):
        """Merit value and gradient.

        With ``lam`` given, the augmented-Lagrangian term
        ``(1/2rho) sum(max(0, lam + rho g)^2 - lam^2)`` for ``g`` over nodes
        ``1..N`` is added. Node 0 does not depend on ``u`` and is excluded.

        Returns:
            ``(merit, gradient, cost, residuals)`` where ``residuals`` are the
            hard residuals of shape ``(K, N+1, 2)``.
        """
        sp = self.spec
        u = np.asarray(u, dtype=float)
        states, sens = self.propagate(u)
        d = self.grid.deltas
        e = states[:, :, sp.state_index] - sp.ref
        sx = sens[:, :, sp.state_index, :]
        cost = self.cost_terms(states, u)
        # d cost / d x_i at each node, averaged over scenarios
        w = np.empty_like(e)
        w[:, :-1] = 2.0 * sp.w_state * e[:, :-1] * d
        w[:, -1] = 2.0 * sp.w_terminal * e[:, -1]
        grad = np.einsum("kn,knj->j", w, sx) / self.K + 2.0 * sp.w_input * u * d
        res = self.constraint_residuals(u, states)
        merit = cost
        if lam is not None:
            g = res[:, 1:, :] + margin
            shifted = np.maximum(0.0, lam + rho * g)
            merit += float(np.sum(shifted**2 - lam**2)) / (2.0 * rho)
            coeff = shifted[..., 1] - shifted[..., 0]
            grad = grad + np.einsum("kn,knj->j", coeff, sx[:, 1:, :])
        return merit, grad, cost, res

    def cost_and_gradient(self, u, lam=None, rho: float = 0.0) -> tuple[float, np.ndarray]:
        merit, grad, _, _ = self.evaluate(u, lam, rho)
        return merit, grad


def _two_loop(g, S, Y):
    # pairs restricted to the free set can lose curvature; drop those
    pairs = [(s, y, float(s @ y)) for s, y in zip(S, Y)]
    pairs = [p for p in pairs if p[2] > 1e-12 * np.linalg.norm(p[0]) * np.linalg.norm(p[1])]
    q = g.copy()
    alphas = []
    for s, y, sy in reversed(pairs):
        a = (s @ q) / sy
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, sy = pairs[-1]
        q *= sy / (y @ y)
    for (s, y, sy), a in zip(pairs, reversed(alphas)):
        b = (y @ q) / sy
        q += (a - b) * s
    return q


def projected_lbfgs(fun, x0, lower, upper, max_iter: int = 300, gtol: float = 1e-5,
                    ftol: float = 1e-13, memory: int = 10, history: list | None = None):
    """Minimise ``fun`` over a box with projected L-BFGS and Armijo backtracking.

    ``fun(x)`` returns ``(value, gradient)``. Every accepted step strictly
    decreases the value, and each accepted value is appended to ``history``.

    Returns:
        ``(x, value, gradient, iterations, converged)``.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = fun(x)
    if not np.isfinite(f):
        raise SolverError("non-finite objective at the starting point")
    if history is not None:
        history.append(f)
    S: deque = deque(maxlen=memory)
    Y: deque = deque(maxlen=memory)
    for it in range(max_iter):
        pg = np.clip(x - g, lower, upper) - x
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            return x, f, g, it, True
        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        gf = np.where(free, g, 0.0)
        d = -_two_loop(gf, [s * free for s in S], [y * free for y in Y]) * free if S else -gf
        slope = g @ d
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -gf
            slope = g @ d
        step = 1.0 if S else min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
        accepted = False
        for _ in range(40):
            x_new = np.clip(x + step * d, lower, upper)
            dx = x_new - x
            if not np.any(dx):
                break
            f_new, g_new = fun(x_new)
            if not np.isfinite(f_new):
                raise SolverError(f"non-finite merit value at iteration {it}")
            if f_new <= f + 1e-4 * min(g @ dx, 0.0) and f_new < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if S:
                S.clear()
                Y.clear()
                continue
            return x, f, g, it, False
        y = g_new - g
        if dx @ y > 1e-12 * np.linalg.norm(dx) * np.linalg.norm(y):
            S.append(dx)
            Y.append(y)
        small = f - f_new <= ftol * max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        if history is not None:
            history.append(f)
        if small:
            return x, f, g, it + 1, True
    return x, f, g, max_iter, False


def solve_ocp(problem: ScenarioProblem, solver: SolverConfig = SolverConfig(),
              u_init=None) -> tuple[ControlTrajectory, SolveReport]:
    """Augmented-Lagrangian solve of the scenario program.

    Returns the best feasible iterate found (lowest cost), or the least
    infeasible one when none is feasible.
    """
    sp = problem.spec
    grid = problem.grid
    N = grid.N
    u = np.zeros(N) if u_init is None else np.clip(np.asarray(u_init, dtype=float), sp.u_lower, sp.u_upper)
    lam = np.zeros((problem.K, N, 2))
    rho = solver.rho0
    prev_viol = np.inf
    prev_cost = np.inf
    best = None
    inner_total = 0
    histories: list[list[float]] = []
    message = "outer iteration limit"
    success = False
    outer = 0
    stalled = 0
    for outer in range(1, solver.max_outer + 1):
        hist: list[float] = []

        def fun(v, lam=lam, rho=rho):
            m, gr, _, _ = problem.evaluate(v, lam, rho, solver.margin)
            return m, gr

        u, _, _, n_in, conv = projected_lbfgs(fun, u, sp.u_lower, sp.u_upper, solver.max_inner,
                                              solver.gtol, solver.ftol, solver.memory, hist)
        histories.append(hist)
        inner_total += n_in
        _, _, cost, res = problem.evaluate(u)
        viol = max(0.0, float(res.max()))
        viol_u = max(0.0, float(res[:, 1:, :].max()) + solver.margin)
        key = (viol > solver.feas_tol, viol if viol > solver.feas_tol else cost)
        if best is None or key < best[0]:
            best = (key, u.copy(), cost, viol)
        logger.debug("outer %d: cost=%.6g viol=%.3g rho=%.3g inner=%d", outer, cost, viol, rho, n_in)
        lam = np.maximum(0.0, lam + rho * (res[:, 1:, :] + solver.margin))
        if viol <= solver.feas_tol and abs(prev_cost - cost) <= solver.rtol_cost * max(1.0, abs(cost)):
            success, message = True, "converged"
            break
        if rho >= solver.rho_max and viol > solver.feas_tol:
            stalled = stalled + 1 if viol_u > (1.0 - solver.stall_rtol) * prev_viol else 0
            if stalled >= solver.stall_outer:
                message = "infeasible: violation stalled at maximum penalty"
                break
        if viol_u > solver.shrink_factor * prev_viol and viol_u > 0:
            rho = min(rho * solver.rho_growth, solver.rho_max)
        prev_viol = viol_u
        prev_cost = cost
    _, u_best, cost_best, viol_best = best
    if not success and viol_best <= solver.feas_tol:
        success, message = True, "feasible, stopped at outer iteration limit"
    report = SolveReport(success, cost_best, viol_best, outer, inner_total, message, histories)
    return ControlTrajectory(u_best, grid), report
