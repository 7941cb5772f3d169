"""Study driver: ground truth, both planners, realized evaluation and reporting.

Seeds: run ``r`` and stream ``s`` draw from
``np.random.SeedSequence([master_seed, r, STREAMS[s]])``. The ``truth`` stream
samples the patient and the measurement noise, ``mmh`` drives the sampler and
``acf`` feeds the long diagnostic chain.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .csvio import read_columns, write_columns, write_table
from .ekf import ekf_filter, nominal_plan
from .glucose import BERGMAN, STATE_NAMES, THETA_NAMES, bergman_model, simulate_truth, training_signal
from .mmh import ChainResult, PosteriorSampleSet, acf, burn_in_and_thin, infer, run_chain
from .model import Dataset, LatentSample, sample_prior
from .ocp import ControlGrid, ControlTrajectory, Scenario, ScenarioProblem, SolveReport, scenarios_from, solve_ocp
from .ode import Trajectory, integrate_flow, tsit54_integrate

logger = logging.getLogger(__name__)

STREAMS = {"truth": 0, "mmh": 1, "nominal": 2, "acf": 3}
METHODS = ("mmh", "nominal")
SAMPLE_COLUMNS = ("p2", "p3", "n", "G0", "X0", "I0", "logpost")
TRUTH_COLUMNS = ("p2", "p3", "n", "G_init", "X_init", "I_init", "G0", "X0", "I0")


def derive_seed(master: int, run: int, stream: str) -> int:
    """Deterministic 64-bit seed for one (run, stream) pair."""
    return int(np.random.SeedSequence([int(master), int(run), STREAMS[stream]]).generate_state(1, np.uint64)[0])


def stream_rng(master: int, run: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, run, stream))


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the settings that affect results; worker count and output path are excluded."""
    return hashlib.sha256(dataclasses.replace(cfg, workers=1, out_dir="").dumps().encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# Ground truth and data
# ----------------------------------------------------------------------------


@dataclass
class TruthCase:
    """A patient drawn from the prior with its training trajectory and data."""

    truth: LatentSample
    trajectory: Trajectory
    dataset: Dataset

    @property
    def x_end(self) -> np.ndarray:
        return self.trajectory.states[-1].copy()


def make_dataset(cfg: ExperimentConfig, times, outputs) -> Dataset:
    schedule = cfg.schedule()
    T = cfg.training_window
    return Dataset(training_signal(schedule, cfg.training_gain, -T, 0.0), times, outputs,
                   cfg.noise_sigma, -T, 0.0, schedule.disturbance())


def make_truth(cfg: ExperimentConfig, rng: np.random.Generator) -> TruthCase:
    """Sample a patient, simulate the training day with Tsit5, and measure it."""
    prior = cfg.prior.build()
    schedule = cfg.schedule()
    T = cfg.training_window
    truth = sample_prior(prior, rng)
    signal = training_signal(schedule, cfg.training_gain, -T, 0.0)
    traj = simulate_truth(truth, schedule, signal, -T, 0.0, cfg.truth_step)
    step = cfg.integrator.step_size
    times = np.sort(rng.uniform(-T, 0.0, size=cfg.n_measurements))
    times = np.clip(np.round(times / step) * step, -T, 0.0)
    idx = np.round((times - traj.times[0]) / cfg.truth_step).astype(int)
    y = traj.states[idx, 0] + cfg.noise_sigma * rng.standard_normal(len(times))
    return TruthCase(truth, traj, make_dataset(cfg, times, y))


# ----------------------------------------------------------------------------
# Realized evaluation
# ----------------------------------------------------------------------------


@dataclass
class Evaluation:
    cost: float
    violation: bool
    G_min: float
    G_max: float
    trajectory: Trajectory


def realized_cost(times, G, control: ControlTrajectory, cfg: ExperimentConfig) -> float:
    """Trapezoidal tracking cost on the fine grid, exact input cost, terminal term."""
    sp = cfg.ocp
    e2 = (np.asarray(G) - sp.ref) ** 2
    track = sp.w_state * float(np.trapezoid(e2, times))
    u = np.asarray(control.values, dtype=float).reshape(control.grid.N, -1)
    effort = sp.w_input * float(np.sum(u**2 * control.grid.deltas[:, None]))
    return track + effort + sp.w_terminal * float(e2[-1])


def check_horizon(control: ControlTrajectory, cfg: ExperimentConfig) -> None:
    nodes = control.grid.nodes
    if abs(nodes[0]) > 1e-9 or abs(nodes[-1] - cfg.horizon) > 1e-9:
        raise ValueError(f"control covers [{nodes[0]:g}, {nodes[-1]:g}] but the horizon is [0, {cfg.horizon:g}]")


def evaluate_control(control: ControlTrajectory, theta, x0, cfg: ExperimentConfig) -> Evaluation:
    """Apply ``control`` to the true system from ``x(0) = x0`` (Tsit5, fine grid)."""
    check_horizon(control, cfg)
    model = bergman_model()
    traj = tsit54_integrate(BERGMAN, x0, model.params(theta), control.signal(), 0.0, cfg.horizon,
                            cfg.truth_step, disturbance=cfg.schedule().disturbance())
    G = traj.states[:, 0]
    sp = cfg.ocp
    violation = bool(np.any(G < sp.state_lower) or np.any(G > sp.state_upper))
    return Evaluation(realized_cost(traj.times, G, control, cfg), violation, float(G.min()),
                      float(G.max()), traj)


def scenario_problem(cfg: ExperimentConfig, scenarios: list[Scenario]) -> ScenarioProblem:
    return ScenarioProblem(bergman_model(), scenarios, cfg.grid(), cfg.ocp, cfg.integrator,
                           cfg.schedule().disturbance())


def predicted_envelope(problem: ScenarioProblem, control: ControlTrajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-scenario glucose predictions on the integrator grid: ``(times, G[K, n_t])``."""
    h = problem.cfg.step_size
    H = problem.grid.horizon
    times = np.arange(0.0, H + 0.5 * h, h)
    sig = control.signal()
    G = np.empty((problem.K, len(times)))
    for k, sc in enumerate(problem.scenarios):
        tr = integrate_flow(problem.model.field, sc.x0, problem.params[k], sig, problem.grid.nodes[0],
                            problem.grid.nodes[-1], problem.cfg, times, problem.disturbance)
        G[k] = tr.states[:, problem.spec.state_index]
    return times, G


def within_envelope(times, G_pred, realized: Trajectory, slack: float) -> bool:
    G_true = np.interp(times, realized.times, realized.states[:, 0])
    return bool(np.all(G_true >= G_pred.min(axis=0) - slack) and np.all(G_true <= G_pred.max(axis=0) + slack))


def box_feasible(control: ControlTrajectory, cfg: ExperimentConfig) -> bool:
    u = np.asarray(control.values)
    return bool(np.all(u >= cfg.ocp.u_lower) and np.all(u <= cfg.ocp.u_upper))


# ----------------------------------------------------------------------------
# Planners
# ----------------------------------------------------------------------------


def mmh_plan(cfg: ExperimentConfig, dataset: Dataset, rng: np.random.Generator,
             ) -> tuple[ControlTrajectory, SolveReport, ScenarioProblem, PosteriorSampleSet, ChainResult]:
    post, chain = infer(dataset, bergman_model(), cfg.prior.build(), cfg.chain, rng, cfg.integrator)
    problem = scenario_problem(cfg, scenarios_from(post))
    u, report = solve_ocp(problem, cfg.solver)
    return u, report, problem, post, chain


def nominal_theta(cfg: ExperimentConfig) -> np.ndarray:
    return np.exp(np.asarray(cfg.prior.log_mu, dtype=float))


def baseline_plan(cfg: ExperimentConfig, dataset: Dataset):
    return nominal_plan(dataset, bergman_model(), nominal_theta(cfg), cfg.prior.build(), cfg.ocp,
                        cfg.grid(), cfg.solver, cfg.ekf, cfg.schedule().disturbance())


def oracle_feasible(cfg: ExperimentConfig, theta, x0) -> bool:
    """Whether the planner finds a feasible input when it knows the truth exactly."""
    _, report = solve_ocp(scenario_problem(cfg, [Scenario(np.asarray(theta), np.asarray(x0), 0)]),
                          cfg.solver)
    return report.success


# ----------------------------------------------------------------------------
# Monte Carlo
# ----------------------------------------------------------------------------


@dataclass
class RunResult:
    """Realized outcome of one planner on one sampled patient."""

    run: int
    method: str
    theta: tuple[float, ...]
    x_init: tuple[float, ...]
    cost: float = float("nan")
    violation: bool = False
    G_min: float = float("nan")
    G_max: float = float("nan")
    wall_time: float = 0.0
    solver_success: bool = False
    solver_residual: float = float("nan")
    box_feasible: bool = False
    envelope_ok: bool | None = None
    oracle_feasible: bool | None = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


RUN_COLUMNS = ("run", "method", *THETA_NAMES, *(f"{s}_init" for s in STATE_NAMES), "cost", "violation",
               "G_min", "G_max", "solver_success", "solver_residual", "box_feasible", "envelope_ok",
               "oracle_feasible", "wall_time", "error")


def _row(r: RunResult) -> list:
    return [r.run, r.method, *r.theta, *r.x_init, r.cost, r.violation, r.G_min, r.G_max,
            r.solver_success, r.solver_residual, r.box_feasible, r.envelope_ok, r.oracle_feasible,
            r.wall_time, r.error]


def run_once(cfg: ExperimentConfig, run: int, check_oracle: bool = True) -> list[RunResult]:
    """Sample a patient, plan with both methods, evaluate both on the truth."""
    case = make_truth(cfg, stream_rng(cfg.seed, run, "truth"))
    theta = tuple(float(v) for v in case.truth.theta)
    x_init = tuple(float(v) for v in case.truth.x0)
    x_end = case.x_end
    feasible = oracle_feasible(cfg, theta, x_end) if check_oracle else None
    results = []
    for method in METHODS:
        res = RunResult(run, method, theta, x_init, oracle_feasible=feasible)
        t0 = time.perf_counter()
        try:
            if method == "mmh":
                u, report, problem, _, _ = mmh_plan(cfg, case.dataset, stream_rng(cfg.seed, run, "mmh"))
            else:
                u, report, _ = baseline_plan(cfg, case.dataset)
            ev = evaluate_control(u, theta, x_end, cfg)
            res.cost, res.violation, res.G_min, res.G_max = ev.cost, ev.violation, ev.G_min, ev.G_max
            res.solver_success, res.solver_residual = report.success, report.max_violation
            res.box_feasible = box_feasible(u, cfg)
            if method == "mmh":
                times, G_pred = predicted_envelope(problem, u)
                res.envelope_ok = within_envelope(times, G_pred, ev.trajectory, cfg.envelope_slack)
        except Exception as err:  # recorded per run, the batch continues
            logger.warning("run %d (%s) failed: %s", run, method, err)
            res.error = f"{type(err).__name__}: {err}".replace("\n", " ")
        res.wall_time = time.perf_counter() - t0
        results.append(res)
    logger.info("run %d: %s", run, ", ".join(f"{r.method} cost={r.cost:.4g} viol={r.violation}" for r in results))
    return results


def _job(args) -> list[RunResult]:
    cfg, run, check_oracle = args
    return run_once(cfg, run, check_oracle)


def monte_carlo(cfg: ExperimentConfig, check_oracle: bool = True) -> list[RunResult]:
    """All runs, in run order regardless of the worker count."""
    jobs = [(cfg, r, check_oracle) for r in range(cfg.runs)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            batches = list(pool.map(_job, jobs))
    else:
        batches = [_job(j) for j in jobs]
    return [r for batch in batches for r in batch]


@dataclass(frozen=True)
class MethodSummary:
    runs: int
    failures: int
    violations: int
    cost_mean: float
    cost_std: float


def summarize_method(results: list[RunResult], method: str) -> MethodSummary:
    rows = [r for r in results if r.method == method]
    ok = [r for r in rows if not r.failed]
    costs = np.array([r.cost for r in ok])
    mean = float(costs.mean()) if len(costs) else float("nan")
    std = float(costs.std(ddof=1)) if len(costs) > 1 else 0.0
    return MethodSummary(len(rows), len(rows) - len(ok), sum(r.violation for r in ok), mean, std)


def summary_text(results: list[RunResult], cfg: ExperimentConfig) -> str:
    """Key-value summary; contains no timings so it is reproducible byte for byte."""
    lines = [f"seed = {cfg.seed}", f"config_hash = {config_hash(cfg)}", f"runs = {cfg.runs}",
             f"scenarios = {cfg.chain.K}"]
    by_run = {r.run: r for r in results if r.method == "mmh"}
    for m in METHODS:
        s = summarize_method(results, m)
        lines += [f"{m}.cost_mean_e4 = {s.cost_mean / 1e4:.6f}",
                  f"{m}.cost_std_e4 = {s.cost_std / 1e4:.6f}",
                  f"{m}.violations = {s.violations}",
                  f"{m}.failures = {s.failures}"]
        solved = [r for r in results if r.method == m and r.solver_success]
        lines.append(f"{m}.solver_success = {len(solved)}")
        if any(r.oracle_feasible is not None for r in results):
            feas = [r for r in results if r.method == m and r.oracle_feasible and not r.failed]
            lines.append(f"{m}.violations_when_oracle_feasible = {sum(r.violation for r in feas)}")
    env = [r.envelope_ok for r in by_run.values() if r.envelope_ok is not None]
    lines.append(f"mmh.envelope_contained = {sum(env)}")
    if any(r.oracle_feasible is not None for r in by_run.values()):
        lines.append(f"oracle_feasible_runs = {sum(bool(r.oracle_feasible) for r in by_run.values())}")
    lines.append("")
    lines.append(f"# {'method':<10}{'cost (x1e4)':>20}{'violations':>14}")
    for m in METHODS:
        s = summarize_method(results, m)
        lines.append(f"# {m:<10}{f'{s.cost_mean / 1e4:.2f} +/- {s.cost_std / 1e4:.2f}':>20}"
                     f"{f'{s.violations}/{s.runs - s.failures}':>14}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line and not line.startswith("#"):
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ----------------------------------------------------------------------------
# File outputs
# ----------------------------------------------------------------------------


def write_dataset(path, dataset: Dataset) -> Path:
    return write_columns(path, {"t_min": dataset.times, "y_mgdl": dataset.outputs})


def read_dataset(path, cfg: ExperimentConfig) -> Dataset:
    cols = read_columns(path, ("t_min", "y_mgdl"))
    return make_dataset(cfg, cols["t_min"], cols["y_mgdl"])


def write_truth(path, case: TruthCase) -> Path:
    row = [*case.truth.theta, *case.truth.x0, *case.x_end]
    return write_table(path, TRUTH_COLUMNS, [row])


def read_truth(path) -> tuple[np.ndarray, np.ndarray]:
    """``(theta, x(0))`` from a truth file."""
    cols = read_columns(path, ("p2", "p3", "n", "G0", "X0", "I0"))
    theta = np.array([cols[c][0] for c in ("p2", "p3", "n")])
    return theta, np.array([cols[c][0] for c in ("G0", "X0", "I0")])


def write_samples(path, post: PosteriorSampleSet) -> Path:
    data = np.column_stack([post.theta, post.x0, post.logpost])
    return write_columns(path, dict(zip(SAMPLE_COLUMNS, data.T)))


def read_samples(path) -> list[LatentSample]:
    cols = read_columns(path, SAMPLE_COLUMNS[:6])
    theta = np.column_stack([cols[c] for c in SAMPLE_COLUMNS[:3]])
    x0 = np.column_stack([cols[c] for c in SAMPLE_COLUMNS[3:6]])
    if len(theta) == 0:
        raise ValueError(f"{path}: no samples")
    return [LatentSample(t, x) for t, x in zip(theta, x0)]


def write_acf(path, values: np.ndarray) -> Path:
    cols = {"lag": np.arange(values.shape[0])}
    cols.update({name: values[:, i] for i, name in enumerate((*THETA_NAMES, *STATE_NAMES))})
    return write_columns(path, cols)


def write_acceptance(path, cfg: ExperimentConfig, chain: ChainResult) -> Path:
    rows = [(f"stage{i + 1}", m, it, rate) for i, ((m, it), rate) in enumerate(zip(cfg.chain.stages, chain.stage_acceptance))]
    n_prod = chain.n_proposals - sum(it for _, it in cfg.chain.stages)
    rows.append(("production", cfg.n_measurements, n_prod, chain.acceptance))
    return write_table(path, ("stage", "measurements", "proposals", "acceptance"), rows)


def write_control(path, control: ControlTrajectory) -> Path:
    return write_columns(path, {"t_min": control.grid.nodes[:-1], "u_mU_per_min": control.values})


def read_control(path, cfg: ExperimentConfig) -> ControlTrajectory:
    """Rebuild a control from node start times; the last interval ends at the horizon."""
    cols = read_columns(path, ("t_min", "u_mU_per_min"))
    t = cols["t_min"]
    if len(t) == 0:
        raise ValueError(f"{path}: no control intervals")
    if len(t) > 1 and not np.isclose(t[-1] + (t[-1] - t[-2]), cfg.horizon):
        raise ValueError(f"{path}: control grid ends at {t[-1] + t[-1] - t[-2]:g}, horizon is {cfg.horizon:g}")
    if t[-1] >= cfg.horizon:
        raise ValueError(f"{path}: control extends beyond the horizon {cfg.horizon:g}")
    return ControlTrajectory(cols["u_mU_per_min"], ControlGrid(np.append(t, cfg.horizon)))


def write_envelope(path, times, G_pred) -> Path:
    cols = {"t_min": times}
    cols.update({f"G_{k}": G_pred[k] for k in range(len(G_pred))})
    cols.update({"G_mean": G_pred.mean(axis=0), "G_min": G_pred.min(axis=0), "G_max": G_pred.max(axis=0)})
    return write_columns(path, cols)


def write_ekf_trace(path, trace) -> Path:
    t = [row[0] for row in trace]
    mean = np.array([row[1] for row in trace])
    var = np.array([row[2] for row in trace])
    return write_columns(path, {"t": t, "G_mean": mean[:, 0], "X_mean": mean[:, 1], "I_mean": mean[:, 2],
                                "P_GG": var[:, 0], "P_XX": var[:, 1], "P_II": var[:, 2]})


def write_runs(path, results: list[RunResult]) -> Path:
    return write_table(path, RUN_COLUMNS, [_row(r) for r in results])


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> TruthCase:
    """Draw one patient (run 0 of the truth stream); write truth, dataset and trajectory."""
    case = make_truth(cfg, stream_rng(cfg.seed, 0, "truth"))
    write_truth(out / "truth.csv", case)
    write_dataset(out / "dataset.csv", case.dataset)
    tr = case.trajectory
    write_columns(out / "trajectory.csv", {"t_min": tr.times, "G": tr.states[:, 0], "X": tr.states[:, 1],
                                           "I": tr.states[:, 2]})
    return case


def cmd_infer(cfg: ExperimentConfig, dataset_path, out: Path) -> PosteriorSampleSet:
    dataset = read_dataset(dataset_path, cfg)
    post, chain = infer(dataset, bergman_model(), cfg.prior.build(), cfg.chain,
                        stream_rng(cfg.seed, 0, "mmh"), cfg.integrator)
    write_samples(out / "samples.csv", post)
    lag = min(cfg.acf_max_lag, len(chain.samples) - 1)
    write_acf(out / "acf.csv", chain_acf(chain, lag))
    write_acceptance(out / "acceptance.csv", cfg, chain)
    return post


def cmd_plan(cfg: ExperimentConfig, samples_path, out: Path) -> tuple[ControlTrajectory, SolveReport]:
    scenarios = scenarios_from(read_samples(samples_path))
    problem = scenario_problem(cfg, scenarios)
    u, report = solve_ocp(problem, cfg.solver)
    write_control(out / "control.csv", u)
    times, G_pred = predicted_envelope(problem, u)
    write_envelope(out / "predictions.csv", times, G_pred)
    return u, report


def cmd_nominal(cfg: ExperimentConfig, dataset_path, out: Path) -> tuple[ControlTrajectory, SolveReport]:
    """Baseline: EKF under nominal parameters, then a one-scenario plan."""
    dataset = read_dataset(dataset_path, cfg)
    _, trace = ekf_filter(dataset, bergman_model(), bergman_model().params(nominal_theta(cfg)),
                          cfg.prior.build(), cfg.ekf)
    write_ekf_trace(out / "ekf_trace.csv", trace)
    u, report, _ = baseline_plan(cfg, dataset)
    write_control(out / "control_nominal.csv", u)
    return u, report


def cmd_evaluate(cfg: ExperimentConfig, control_path, truth_path, out: Path | None = None) -> Evaluation:
    control = read_control(control_path, cfg)
    theta, x0 = read_truth(truth_path)
    ev = evaluate_control(control, theta, x0, cfg)
    if out is not None:
        write_table(out / "evaluation.csv", ("cost", "violation", "G_min", "G_max"),
                    [(ev.cost, ev.violation, ev.G_min, ev.G_max)])
    return ev


def cmd_monte_carlo(cfg: ExperimentConfig, out: Path, check_oracle: bool = True) -> tuple[list[RunResult], str]:
    results = monte_carlo(cfg, check_oracle)
    write_runs(out / "runs.csv", results)
    text = summary_text(results, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(text)
    return results, text


def chain_acf(chain: ChainResult, max_lag: int) -> np.ndarray:
    """ACF of every chain component, shape ``(max_lag + 1, d)``."""
    return np.column_stack([acf(chain.samples[:, j], max_lag) for j in range(chain.samples.shape[1])])


def long_chain(cfg: ExperimentConfig) -> ChainResult:
    """One unthinned chain of ``acf_samples`` states (after burn-in) on one prior draw."""
    case = make_truth(cfg, stream_rng(cfg.seed, 0, "acf"))
    chain_cfg = dataclasses.replace(cfg.chain, K=cfg.acf_samples, k_d=0)
    chain = run_chain(case.dataset, bergman_model(), cfg.prior.build(), chain_cfg,
                      stream_rng(cfg.seed, 0, "mmh"), cfg.integrator)
    keep = burn_in_and_thin(np.arange(len(chain.samples)), chain_cfg.K_b, 0, chain_cfg.K)
    return dataclasses.replace(chain, samples=chain.samples[keep], logpost=chain.logpost[keep],
                               loglik=chain.loglik[keep])


def cmd_acf(cfg: ExperimentConfig, out: Path) -> np.ndarray:
    chain = long_chain(cfg)
    values = chain_acf(chain, cfg.acf_max_lag)
    write_acf(out / "acf.csv", values)
    return values

