from __future__ import annotations

import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmhplan.config import ConfigError, ExperimentConfig
from mmhplan.csvio import read_columns, write_columns
from mmhplan.experiment import (
    RUN_COLUMNS,
    RunResult,
    check_horizon,
    cmd_evaluate,
    cmd_monte_carlo,
    cmd_simulate,
    derive_seed,
    evaluate_control,
    make_truth,
    parse_summary,
    read_control,
    read_samples,
    read_truth,
    realized_cost,
    stream_rng,
    summarize_method,
    summary_text,
    within_envelope,
    write_control,
)
from mmhplan.mmh import ChainConfig
from mmhplan.ocp import ControlGrid, ControlTrajectory, SolverConfig
from mmhplan.ode import Trajectory

# small enough to run the full pipeline in seconds
FAST = ExperimentConfig(runs=1, chain=ChainConfig(K=5, K_b=50, k_d=2, stages=((25, 100), (200, 100))),
                        solver=SolverConfig(max_outer=5, max_inner=100))


def flat_control(cfg, value):
    grid = cfg.grid()
    return ControlTrajectory(np.full(grid.N, float(value)), grid)


class TestConfig:
    def test_round_trip_default(self):
        cfg = ExperimentConfig()
        assert ExperimentConfig.loads(cfg.dumps()) == cfg

    @given(st.integers(0, 2**64 - 1), st.integers(1, 500), st.floats(0.1, 50.0), st.floats(0.0, 30.0),
           st.sampled_from(["iterations", "accepted"]), st.integers(1, 200))
    def test_round_trip(self, seed, runs, sigma, gain, counting, K):
        cfg = ExperimentConfig(seed=seed, runs=runs, noise_sigma=sigma, training_gain=gain,
                               chain=ChainConfig(K=K, counting=counting))
        assert ExperimentConfig.loads(cfg.dumps()) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = dataclasses.replace(ExperimentConfig(), meals=((-100.0, 20.0),), seed=9)
        cfg.save(tmp_path / "c.toml")
        assert ExperimentConfig.load(tmp_path / "c.toml") == cfg

    def test_integer_where_float_expected(self):
        assert ExperimentConfig.loads("noise_sigma = 8\n").noise_sigma == 8.0

    @pytest.mark.parametrize("text", ["bogus = 1\n", "runs = 0\n", "[chain]\nK = 0\n", "runs = [\n",
                                      "meals = [[0.0, -5.0]]\n", "[ocp]\nnope = 1\n"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.loads(text)

    def test_full_scale(self):
        cfg = ExperimentConfig().full_scale()
        assert (cfg.runs, cfg.chain.K, cfg.acf_samples) == (100, 100, 100_000)


class TestSeeds:
    def test_streams_differ(self):
        seeds = {derive_seed(0, r, s) for r in range(3) for s in ("truth", "mmh", "nominal", "acf")}
        assert len(seeds) == 12

    def test_stable(self):
        assert derive_seed(7, 3, "mmh") == derive_seed(7, 3, "mmh")
        a = stream_rng(7, 3, "truth").random(4)
        np.testing.assert_array_equal(a, stream_rng(7, 3, "truth").random(4))


class TestSimulate:
    def test_deterministic_files(self, tmp_path):
        cfg = dataclasses.replace(ExperimentConfig(), seed=3)
        cmd_simulate(cfg, tmp_path / "a")
        cmd_simulate(cfg, tmp_path / "b")
        for name in ("dataset.csv", "truth.csv", "trajectory.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_dataset_shape(self, tmp_path):
        cmd_simulate(ExperimentConfig(), tmp_path)
        cols = read_columns(tmp_path / "dataset.csv", ("t_min", "y_mgdl"))
        assert len(cols["t_min"]) == 200
        assert np.all((cols["t_min"] >= -720) & (cols["t_min"] <= 0))

    def test_truth_file(self, tmp_path):
        case = cmd_simulate(ExperimentConfig(), tmp_path)
        theta, x0 = read_truth(tmp_path / "truth.csv")
        np.testing.assert_array_equal(theta, case.truth.theta)
        np.testing.assert_array_equal(x0, case.x_end)

    def test_truth_measurements_on_trajectory(self):
        cfg = dataclasses.replace(ExperimentConfig(), noise_sigma=1e-12)
        case = make_truth(cfg, np.random.default_rng(0))
        G = np.interp(case.dataset.times, case.trajectory.times, case.trajectory.states[:, 0])
        np.testing.assert_allclose(case.dataset.outputs, G, atol=1e-9)


class TestEvaluate:
    def test_equilibrium_costs_nothing(self):
        cfg = dataclasses.replace(ExperimentConfig(), meals=())
        ev = evaluate_control(flat_control(cfg, 0.0), np.exp(cfg.prior.log_mu), [80.0, 0.0, 7.0], cfg)
        assert ev.cost == pytest.approx(0.0, abs=1e-18)
        assert not ev.violation

    def test_input_cost(self):
        cfg = ExperimentConfig()
        grid = cfg.grid()
        t = np.linspace(0, 360, 3601)
        assert realized_cost(t, np.full_like(t, 80.0), flat_control(cfg, 1.0), cfg) == pytest.approx(0.036, rel=1e-12)
        assert grid.horizon == 360.0

    def test_dip_is_violation(self):
        cfg = dataclasses.replace(ExperimentConfig(), meals=())
        ev = evaluate_control(flat_control(cfg, 0.0), np.exp(cfg.prior.log_mu), [80.0, 0.0, 7.0], cfg)
        assert not ev.violation
        ev = evaluate_control(flat_control(cfg, 20.0), np.exp(cfg.prior.log_mu), [80.0, 0.0, 7.0], cfg)
        assert ev.G_min < 70.0 and ev.violation

    def test_violation_matches_extremes(self):
        cfg = ExperimentConfig()
        ev = evaluate_control(flat_control(cfg, 2.0), np.exp(cfg.prior.log_mu), [150.0, 0.0, 7.0], cfg)
        G = ev.trajectory.states[:, 0]
        assert ev.violation == bool(np.any(G < 70) or np.any(G > 180))
        assert ev.G_min == G.min() and ev.G_max == G.max()
        assert ev.cost >= 0.0

    def test_horizon_mismatch(self):
        cfg = ExperimentConfig()
        short = ControlTrajectory(np.zeros(10), ControlGrid.uniform(horizon=50.0, spacing=5.0))
        with pytest.raises(ValueError):
            check_horizon(short, cfg)
        with pytest.raises(ValueError):
            evaluate_control(short, np.exp(cfg.prior.log_mu), [80.0, 0.0, 7.0], cfg)

    def test_control_file_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        u = ControlTrajectory(np.linspace(0, 20, 72), cfg.grid())
        write_control(tmp_path / "u.csv", u)
        back = read_control(tmp_path / "u.csv", cfg)
        np.testing.assert_array_equal(back.values, u.values)
        np.testing.assert_array_equal(back.grid.nodes, u.grid.nodes)

    def test_control_file_wrong_horizon(self, tmp_path):
        write_columns(tmp_path / "u.csv", {"t_min": [0.0, 5.0, 10.0], "u_mU_per_min": [1.0, 1.0, 1.0]})
        with pytest.raises(ValueError):
            read_control(tmp_path / "u.csv", ExperimentConfig())

    def test_cmd_evaluate(self, tmp_path):
        cfg = ExperimentConfig()
        cmd_simulate(cfg, tmp_path)
        write_control(tmp_path / "u.csv", flat_control(cfg, 1.0))
        ev = cmd_evaluate(cfg, tmp_path / "u.csv", tmp_path / "truth.csv", tmp_path)
        cols = read_columns(tmp_path / "evaluation.csv", ("cost", "violation"))
        assert cols["cost"][0] == ev.cost


class TestEnvelope:
    def test_inside_and_outside(self):
        t = np.linspace(0, 10, 11)
        G_pred = np.vstack([np.full(11, 90.0), np.full(11, 110.0)])
        inside = Trajectory(t, np.column_stack([np.full(11, 114.0), np.zeros(11), np.zeros(11)]))
        outside = Trajectory(t, np.column_stack([np.full(11, 116.0), np.zeros(11), np.zeros(11)]))
        assert within_envelope(t, G_pred, inside, 5.0)
        assert not within_envelope(t, G_pred, outside, 5.0)


class TestSummary:
    def results(self):
        rows = []
        for r, (c1, c2, v) in enumerate([(1e4, 3e4, False), (2e4, 5e4, True), (3e4, 4e4, True)]):
            rows.append(RunResult(r, "mmh", (1, 2, 3), (4, 5, 6), c1, False, solver_success=True,
                                  envelope_ok=True, oracle_feasible=r != 2))
            rows.append(RunResult(r, "nominal", (1, 2, 3), (4, 5, 6), c2, v, solver_success=True,
                                  oracle_feasible=r != 2))
        return rows

    def test_statistics(self):
        s = summarize_method(self.results(), "nominal")
        assert (s.runs, s.violations, s.failures) == (3, 2, 0)
        assert s.cost_mean == pytest.approx(4e4)
        assert s.cost_std == pytest.approx(1e4)

    def test_failures_excluded(self):
        rows = self.results() + [RunResult(3, "mmh", (1, 2, 3), (4, 5, 6), error="boom")]
        s = summarize_method(rows, "mmh")
        assert (s.runs, s.failures) == (4, 1)
        assert s.cost_mean == pytest.approx(2e4)

    def test_text_parses(self):
        kv = parse_summary(summary_text(self.results(), ExperimentConfig(runs=3)))
        assert kv["nominal.violations"] == "2"
        assert kv["mmh.violations"] == "0"
        assert kv["nominal.violations_when_oracle_feasible"] == "1"
        assert float(kv["mmh.cost_mean_e4"]) == pytest.approx(2.0)
        assert kv["oracle_feasible_runs"] == "2"


@pytest.fixture(scope="module")
def single_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mc")
    results, text = cmd_monte_carlo(FAST, out)
    return out, results, text


class TestMonteCarlo:
    def test_two_rows(self, single_run):
        out, results, _ = single_run
        assert [r.method for r in results] == ["mmh", "nominal"]
        with (out / "runs.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == RUN_COLUMNS
        assert [r[1] for r in rows[1:]] == ["mmh", "nominal"]

    def test_accounting(self, single_run):
        _, results, _ = single_run
        for r in results:
            assert not r.failed, r.error
            assert r.violation == (r.G_min < 70 or r.G_max > 180)
            assert r.cost >= 0

    def test_same_seed_same_summary(self, single_run, tmp_path):
        out, _, text = single_run
        _, again = cmd_monte_carlo(FAST, tmp_path)
        assert (tmp_path / "summary.txt").read_bytes() == (out / "summary.txt").read_bytes()
        assert again == text

    def test_worker_count_does_not_change_summary(self, single_run, tmp_path):
        _, _, text = single_run
        _, pooled = cmd_monte_carlo(dataclasses.replace(FAST, workers=2), tmp_path)
        assert pooled == text

    def test_run_failure_is_recorded(self, tmp_path):
        cfg = dataclasses.replace(FAST, chain=dataclasses.replace(FAST.chain, max_proposals=10))
        results, text = cmd_monte_carlo(cfg, tmp_path, check_oracle=False)
        mmh = [r for r in results if r.method == "mmh"][0]
        assert mmh.failed and "RuntimeError" in mmh.error
        assert parse_summary(text)["mmh.failures"] == "1"
        assert not [r for r in results if r.method == "nominal"][0].failed


def test_read_samples_requires_rows(tmp_path):
    write_columns(tmp_path / "s.csv", {c: [] for c in ("p2", "p3", "n", "G0", "X0", "I0", "logpost")})
    with pytest.raises(ValueError):
        read_samples(tmp_path / "s.csv")
