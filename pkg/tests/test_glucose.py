from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from mmhplan.glucose import (
    DEFAULT_MEALS,
    GLUCOSE_PRIOR,
    BergmanParams,
    MealSchedule,
    bergman_jacobian,
    bergman_rhs,
    generate_dataset,
    meal_profile,
    nominal_params,
    simulate_truth,
    training_input,
    training_signal,
)
from mmhplan.model import LatentSample, prior_logdensity, sample_prior

finite = st.floats(allow_nan=False, allow_infinity=False)


class TestBergmanRhs:
    def test_steady_state(self):
        np.testing.assert_allclose(bergman_rhs([100.0, 0.0, 7.0], 0.0, 0.0, nominal_params()), 0.0, atol=0)

    def test_remote_insulin_lowers_glucose(self):
        d = bergman_rhs([100.0, 0.01, 7.0], 0.0, 0.0, nominal_params())
        assert d[0] == pytest.approx(-1.0)

    def test_insulin_above_basal_drives_X(self):
        rng = np.random.default_rng(3)
        theta = sample_prior(GLUCOSE_PRIOR, rng).theta
        params = BergmanParams.from_theta(theta)
        d = bergman_rhs([100.0, 0.0, 17.0], 0.0, 0.0, params)
        assert d[1] == pytest.approx(params.p3 * 10.0, rel=1e-14)

    def test_insulin_and_meal_inputs(self):
        params = nominal_params()
        d = bergman_rhs([100.0, 0.0, 7.0], 3.0, 2.0, params)
        assert d[0] == pytest.approx(2.0)
        assert d[2] == pytest.approx(3.0)

    @given(st.floats(1.0, 500.0))
    def test_equilibrium_for_any_glucose(self, G):
        assert np.all(bergman_rhs([G, 0.0, 7.0], 0.0, 0.0, nominal_params()) == 0.0)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            BergmanParams(0.0, 1e-6, 0.2)


class TestJacobian:
    def test_X_zero_row(self):
        A = bergman_jacobian([123.0, 0.0, 9.0], nominal_params())
        np.testing.assert_array_equal(A[0], [0.0, -123.0, 0.0])

    @given(st.floats(40, 300), st.floats(-0.01, 0.03), st.floats(0, 120))
    def test_finite_differences_and_sparsity(self, G, X, I):
        params = nominal_params()
        x = np.array([G, X, I])
        A = bergman_jacobian(x, params)
        fd = np.empty((3, 3))
        for j in range(3):
            # relative step keeps the tiny X column accurate
            d = 1e-6 * max(1.0, abs(x[j])) if j != 1 else 1e-8
            e = np.zeros(3)
            e[j] = d
            fd[:, j] = (bergman_rhs(x + e, 0.0, 0.0, params) - bergman_rhs(x - e, 0.0, 0.0, params)) / (2 * d)
        np.testing.assert_allclose(A, fd, atol=1e-6)
        assert A[1, 0] == A[2, 0] == A[2, 1] == A[0, 2] == 0.0


class TestMeals:
    def test_before_all_meals(self):
        assert meal_profile(-700.0, DEFAULT_MEALS) == 0.0

    def test_peak_rate(self):
        single = MealSchedule(((0.0, 60.0),))
        assert meal_profile(0.0, single) == pytest.approx(30.0)

    def test_meal_mass(self):
        single = MealSchedule(((10.0, 60.0),), 0.5)
        mass, _ = integrate.quad(lambda t: meal_profile(t, single), 10.0, 10.0 + 10 / 0.5, limit=200)
        assert mass == pytest.approx(60.0 * (1 - np.exp(-10.0)), rel=1e-8)
        assert mass == pytest.approx(60.0, rel=1e-3)

    def test_meals_superpose(self):
        t = 70.0
        expected = sum(s * 0.5 * np.exp(-0.5 * (t - tm)) for tm, s in DEFAULT_MEALS.meals if t >= tm)
        assert meal_profile(t, DEFAULT_MEALS) == pytest.approx(expected)

    @pytest.mark.parametrize("meals", [((0.0, 1.0), (0.0, 2.0)), ((0.0, -1.0),)])
    def test_invalid_schedule(self, meals):
        with pytest.raises(ValueError):
            MealSchedule(meals)


class TestTrainingInput:
    def test_outside_windows(self):
        assert training_input(-700.0, DEFAULT_MEALS, 1.0) == 0.0
        assert training_input(-540.0, DEFAULT_MEALS, 1.0) == 0.0

    def test_inside_window(self):
        single = MealSchedule(((0.0, 60.0),))
        assert training_input(30.0, single, gain=1.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("gain", [1.0, 12.0])
    def test_total_insulin_per_meal(self, gain):
        sig = training_signal(DEFAULT_MEALS, gain)
        t = np.arange(-720.0, 0.0, 0.01) + 0.005
        total = np.sum(sig.sample(t)[:, 0]) * 0.01
        assert total == pytest.approx(gain * (60.0 + 90.0), rel=1e-9)

    def test_signal_matches_pointwise_formula(self):
        sig = training_signal(DEFAULT_MEALS)
        for t in np.linspace(-720, -0.01, 97):
            assert sig(t)[0] == pytest.approx(training_input(t, DEFAULT_MEALS))


class TestPrior:
    def test_median_of_p2(self, rng):
        p2 = np.array([sample_prior(GLUCOSE_PRIOR, rng).theta[0] for _ in range(20000)])
        assert np.median(p2) == pytest.approx(np.exp(-4.26), rel=0.02)

    def test_vectorised_moments(self, rng):
        log_theta = rng.normal(GLUCOSE_PRIOR.log_mu, GLUCOSE_PRIOR.log_sigma, size=(100000, 3))
        G = rng.normal(80.0, 8.0, size=100000)
        assert np.exp(np.median(log_theta[:, 0])) == pytest.approx(0.01416, rel=0.02)
        assert G.mean() == pytest.approx(80.0, abs=0.1)

    def test_positivity(self, rng):
        for _ in range(2000):
            assert np.all(sample_prior(GLUCOSE_PRIOR, rng).theta > 0)

    def test_density_at_median(self):
        z = GLUCOSE_PRIOR.median()
        gauss = -np.log(GLUCOSE_PRIOR.log_sigma * np.sqrt(2 * np.pi))
        state = -np.log(GLUCOSE_PRIOR.state_sigma * np.sqrt(2 * np.pi))
        expected = np.sum(gauss - GLUCOSE_PRIOR.log_mu) + np.sum(state)
        assert prior_logdensity(z, GLUCOSE_PRIOR) == pytest.approx(expected, rel=1e-13)

    def test_zero_parameter(self):
        z = LatentSample([0.0, 1e-6, 0.2], [80, 0, 7])
        assert prior_logdensity(z, GLUCOSE_PRIOR) == -np.inf

    def test_matches_scipy(self, rng):
        z = sample_prior(GLUCOSE_PRIOR, rng)
        p = GLUCOSE_PRIOR
        expected = sum(stats.lognorm.logpdf(t, s, scale=np.exp(m)) for t, m, s in zip(z.theta, p.log_mu, p.log_sigma))
        expected += sum(stats.norm.logpdf(x, m, s) for x, m, s in zip(z.x0, p.state_mu, p.state_sigma))
        assert prior_logdensity(z, p) == pytest.approx(expected, rel=1e-12)

    def test_component_integrates_to_one(self):
        p = GLUCOSE_PRIOR
        base = p.median()
        rest = prior_logdensity(base, p) - stats.lognorm.logpdf(base.theta[2], p.log_sigma[2], scale=np.exp(p.log_mu[2]))

        def density(v):
            return np.exp(prior_logdensity(LatentSample([base.theta[0], base.theta[1], v], base.x0), p) - rest)

        total, _ = integrate.quad(density, 0.0, 2.0, limit=200, points=[np.exp(p.log_mu[2])])
        assert total == pytest.approx(1.0, abs=1e-6)


class TestDataset:
    def test_noiseless_data_is_truth(self, rng):
        z = GLUCOSE_PRIOR.median()
        tr = simulate_truth(z)
        ds = generate_dataset(z, DEFAULT_MEALS, training_signal(DEFAULT_MEALS), 200, 0.0, rng, trajectory=tr)
        idx = np.round((ds.times + 720.0) / 0.1).astype(int)
        np.testing.assert_array_equal(ds.outputs, tr.states[idx, 0])

    def test_times_in_window_and_sorted(self, rng):
        z = GLUCOSE_PRIOR.median()
        ds = generate_dataset(z, DEFAULT_MEALS, training_signal(DEFAULT_MEALS), 200, 8.0, rng)
        assert ds.M == 200
        assert np.all((ds.times >= -720) & (ds.times <= 0))
        assert np.all(np.diff(ds.times) >= 0)
        np.testing.assert_allclose(ds.times * 2, np.round(ds.times * 2))

    def test_noise_statistics(self, rng):
        z = GLUCOSE_PRIOR.median()
        tr = simulate_truth(z)
        sig = training_signal(DEFAULT_MEALS)
        resid = []
        for _ in range(50):
            ds = generate_dataset(z, DEFAULT_MEALS, sig, 200, 8.0, rng, trajectory=tr)
            idx = np.round((ds.times + 720.0) / 0.1).astype(int)
            resid.append((ds.outputs - tr.states[idx, 0]) / 8.0)
        r = np.concatenate(resid)
        assert abs(r.mean()) < 0.05
        assert abs(r.var() - 1.0) < 0.05
        assert (8.0 * r).var() == pytest.approx(64.0, abs=3.0)

    def test_nominal_patient_stays_in_range(self):
        tr = simulate_truth(GLUCOSE_PRIOR.median())
        assert 70.0 <= tr.states[:, 0].min() and tr.states[:, 0].max() <= 180.0

    def test_needs_a_measurement(self, rng):
        with pytest.raises(ValueError):
            generate_dataset(GLUCOSE_PRIOR.median(), DEFAULT_MEALS, None, 0, 8.0, rng)
