"""Bergman minimal model of glucose-insulin dynamics with meal disturbances.

Times are minutes relative to 6 pm (``t = 0``). The training window starts at
6 am (``t = -720``) and the control horizon ends at midnight (``t = 360``).

State ``x = (G, X, I)``: glucose [mg/dL], remote insulin action [1/min],
plasma insulin [mU/L]. Input ``u``: insulin infusion [mU/min]. Disturbance
``D``: meal glucose appearance [mg/dL/min].
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import Dataset, LatentSample, PriorSpec, StateSpaceModel
from .ode import (
    FunctionSignal,
    IntegratorConfig,
    PiecewiseConstantSignal,
    Trajectory,
    VectorField,
    tsit54_integrate,
)

T_TRAIN = 720.0
HORIZON = 360.0
MEAL_DECAY = 0.5
TRUTH_STEP = 0.1
# Total training insulin [mU] per mg/dL of meal size, spread over one hour.
TRAINING_GAIN = 12.0

# Parameter vector layout handed to the compiled field.
P2, P3, N_CLEAR, P1, G_BASAL, I_BASAL = range(6)


@nb.njit(cache=True)
def _bergman_rhs(x, u, d, t, p, out):
    G, X, I = x[0], x[1], x[2]
    out[0] = -p[3] * (G - p[4]) - X * G + d
    out[1] = -p[0] * X + p[1] * (I - p[5])
    out[2] = -p[2] * (I - p[5]) + u[0]


@nb.njit(cache=True)
def _bergman_jac(x, u, d, t, p, A, B):
    A[0, 0] = -p[3] - x[1]
    A[0, 1] = -x[0]
    A[0, 2] = 0.0
    A[1, 0] = 0.0
    A[1, 1] = -p[0]
    A[1, 2] = p[1]
    A[2, 0] = 0.0
    A[2, 1] = 0.0
    A[2, 2] = -p[2]
    B[0, 0] = 0.0
    B[1, 0] = 0.0
    B[2, 0] = 1.0


BERGMAN = VectorField(_bergman_rhs, n_x=3, n_u=1, jac=_bergman_jac, name="bergman")

STATE_NAMES = ("G", "X", "I")
THETA_NAMES = ("p2", "p3", "n")


@dataclass(frozen=True)
class BergmanParams:
    p2: float
    p3: float
    n: float
    p1: float = 0.0
    G_b: float = 80.0  # unused while p1 == 0
    I_b: float = 7.0

    def __post_init__(self):
        if not (self.p2 > 0 and self.p3 > 0 and self.n > 0):
            raise ValueError("p2, p3 and n must be positive")

    def vector(self) -> np.ndarray:
        return np.array([self.p2, self.p3, self.n, self.p1, self.G_b, self.I_b])

    @classmethod
    def from_theta(cls, theta, **fixed) -> BergmanParams:
        return cls(float(theta[0]), float(theta[1]), float(theta[2]), **fixed)


def bergman_rhs(state, u: float, D: float, params: BergmanParams) -> np.ndarray:
    """Time derivative ``(dG, dX, dI)`` of the minimal model."""
    return BERGMAN(state, [u], D, 0.0, params.vector())


def bergman_jacobian(state, params: BergmanParams) -> np.ndarray:
    """``df/dx`` of the minimal model, a 3x3 upper-triangular-plus-(0,1) matrix."""
    return BERGMAN.jacobians(state, [0.0], 0.0, 0.0, params.vector())[0]


# Priors: p2 ~ LogNormal(-4.26, 0.18^2), p3 ~ LogNormal(-13.27, 0.28^2),
# n ~ LogNormal(-1.66, 0.23^2); G ~ N(80, 8^2), X ~ N(0, 0.001^2), I ~ N(7, 2^2).
# The nominal patient is the prior median.
GLUCOSE_PRIOR = PriorSpec(
    log_mu=[-4.26, -13.27, -1.66],
    log_sigma=[0.18, 0.28, 0.23],
    state_mu=[80.0, 0.0, 7.0],
    state_sigma=[8.0, 0.001, 2.0],
    theta_names=THETA_NAMES,
    state_names=STATE_NAMES,
)


def nominal_params(prior: PriorSpec = GLUCOSE_PRIOR) -> BergmanParams:
    return BergmanParams.from_theta(np.exp(prior.log_mu))


def bergman_model(fixed: BergmanParams | None = None) -> StateSpaceModel:
    """Minimal model with ``(p2, p3, n)`` inferred and glucose observed."""
    fixed = fixed or nominal_params()
    return StateSpaceModel(BERGMAN, fixed.vector(), (P2, P3, N_CLEAR), observed=0,
                           state_names=STATE_NAMES, theta_names=THETA_NAMES)


# ----------------------------------------------------------------------------
# Meals and inputs
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MealSchedule:
    """Meals as ``(time [min], size [mg/dL])`` pairs with exponential appearance."""

    meals: tuple[tuple[float, float], ...]
    decay: float = MEAL_DECAY

    def __post_init__(self):
        meals = tuple((float(t), float(s)) for t, s in self.meals)
        object.__setattr__(self, "meals", meals)
        times = [t for t, _ in meals]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("meal times must be strictly increasing")
        if any(s <= 0 for _, s in meals) or not self.decay > 0:
            raise ValueError("meal sizes and decay rate must be positive")

    def rate(self, t, left: bool = False) -> np.ndarray:
        """Vectorised glucose appearance ``D(t)``; ``left`` gives the left limit."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for t_meal, size in self.meals:
            started = t > t_meal if left else t >= t_meal
            dt = np.where(started, t - t_meal, 0.0)
            out += np.where(started, size * self.decay * np.exp(-self.decay * dt), 0.0)
        return out

    def disturbance(self) -> FunctionSignal:
        return FunctionSignal(lambda t, left: self.rate(t, left)[:, None], n=1)


DEFAULT_MEALS = MealSchedule(((-600.0, 60.0), (-300.0, 90.0), (60.0, 80.0)))


def meal_profile(t: float, schedule: MealSchedule) -> float:
    """``D(t) = sum S B exp(-B (t - t_meal))`` over meals that have started."""
    return float(schedule.rate(np.array([t]))[0])


def training_input(t: float, schedule: MealSchedule, gain: float = TRAINING_GAIN) -> float:
    """Insulin rate ``gain * S_meal / 60`` for one hour after each meal, summed."""
    return sum(gain * size / 60.0 for t_meal, size in schedule.meals if t_meal <= t < t_meal + 60.0)


def training_signal(schedule: MealSchedule, gain: float = TRAINING_GAIN,
                    t_start: float = -T_TRAIN, t_end: float = 0.0) -> PiecewiseConstantSignal:
    """The training input as a zero-order-hold signal on ``[t_start, t_end]``."""
    edges = {t_start, t_end}
    for t_meal, _ in schedule.meals:
        for e in (t_meal, t_meal + 60.0):
            if t_start < e < t_end:
                edges.add(e)
    edges = np.array(sorted(edges))
    values = [training_input(a, schedule, gain) for a in edges[:-1]]
    return PiecewiseConstantSignal(edges, values)


# ----------------------------------------------------------------------------
# Ground truth and data
# ----------------------------------------------------------------------------


def simulate_truth(truth: LatentSample, schedule: MealSchedule = DEFAULT_MEALS,
                   input=None, t_start: float = -T_TRAIN, t_end: float = 0.0,
                   h: float = TRUTH_STEP, fixed: BergmanParams | None = None) -> Trajectory:
    """Tsit5 ground-truth trajectory on the fine grid."""
    model = bergman_model(fixed)
    if input is None:
        input = training_signal(schedule, t_start=t_start, t_end=t_end)
    return tsit54_integrate(BERGMAN, truth.x0, model.params(truth.theta), input, t_start,
                            t_end, h, disturbance=schedule.disturbance())


def generate_dataset(truth: LatentSample, schedule: MealSchedule, input, M: int,
                     sigma: float, rng: np.random.Generator, T: float = T_TRAIN,
                     grid_step: float = IntegratorConfig().step_size,
                     trajectory: Trajectory | None = None) -> Dataset:
    """Draw ``M`` sorted measurement times on ``[-T, 0]`` and noisy glucose readings.

    Times are snapped to the inference grid (multiples of ``grid_step``).
    """
    if M < 1:
        raise ValueError("need at least one measurement")
    if trajectory is None:
        trajectory = simulate_truth(truth, schedule, input, -T, 0.0)
    times = np.sort(rng.uniform(-T, 0.0, size=M))
    times = np.clip(np.round(times / grid_step) * grid_step, -T, 0.0)
    idx = np.round((times - trajectory.times[0]) / (trajectory.times[1] - trajectory.times[0]))
    G = trajectory.states[idx.astype(int), 0]
    y = G + sigma * rng.standard_normal(M)
    return Dataset(input, times, y, float(sigma), -T, 0.0, schedule.disturbance())
