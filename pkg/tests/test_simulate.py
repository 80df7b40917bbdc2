import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstantRewardModel, sysrisk_policy
from mfac.exceptions import ParameterError, SimulationOverflowError, UnsupportedModelError
from mfac.models import LQRModel
from mfac.policy import AffineFeatureMap, GaussianPolicy, regularized_reward
from mfac.simulate import (
    InitialCondition,
    closed_loop_transition,
    estimate_value,
    occupancy_samples,
    propagate_euler,
    simulate,
    simulate_affine_exact,
    simulate_euler,
)

E1 = np.exp(-1.0)
OU_VAR = 0.25 * (1 - np.exp(-2.0)) / 2


def scalar_lqr(A=-1.0, gamma=0.5, **kw):
    base = dict(A=A, B=1.0, Q=1.0, N=1.0, gamma=gamma, temperature=0.1, discount=1.0)
    base.update(kw)
    return LQRModel(**base)


def passive_policy(d=1):
    """Zero feedback; with B = 0 the action never reaches the state."""
    f = AffineFeatureMap.affine(d)
    return GaussianPolicy(np.zeros((d, f.dim)), 0.1 * np.eye(d), f)


def point(x, d=1):
    x = np.full(d, x, dtype=float)
    return InitialCondition(x, np.zeros((d, d)), x)


class TestEuler:
    def test_frozen_without_drift_or_noise(self):
        model = scalar_lqr(A=0.0, B=0.0, gamma=0.0)
        batch = simulate_euler(model, passive_policy(), point(0.7), 1.0, 0.1, 3)
        assert np.all(batch.states == 0.7)
        assert np.all(batch.population == 0.7)

    def test_linear_decay_matches_ode(self):
        model = scalar_lqr(B=0.0, gamma=0.0)
        batch = simulate_euler(model, passive_policy(), point(1.0), 1.01, 0.01, 1)
        assert batch.times[-1] == pytest.approx(1.0)
        assert abs(batch.states[0, -1, 0] - E1) <= 0.01

    def test_ornstein_uhlenbeck_moments(self):
        model = scalar_lqr(B=0.0)
        batch = simulate_euler(model, passive_policy(), point(1.0), 1.01, 0.01, 10_000, seed=3)
        x = batch.states[:, -1, 0]
        se = x.std(ddof=1) / np.sqrt(x.size)
        assert abs(x.mean() - E1) <= 3 * se
        assert abs(x.var(ddof=1) / OU_VAR - 1) <= 0.05

    def test_population_particles_share_the_law(self):
        model = scalar_lqr(B=0.0)
        init = InitialCondition([1.0], [[0.0]], [1.0], [[0.0]], n_particles=2000)
        batch = simulate_euler(model, passive_policy(), init, 1.01, 0.01, 1, seed=4)
        x = batch.population[0, -1, :, 0]
        assert abs(x.mean() - E1) <= 3 * x.std() / np.sqrt(x.size)
        assert abs(x.var() / OU_VAR - 1) <= 0.1

    def test_representative_and_population_noise_are_independent(self):
        model = scalar_lqr(B=0.0)
        init = InitialCondition([0.0], [[0.0]], [0.0], [[0.0]], n_particles=1)
        batch = simulate_euler(model, passive_policy(), init, 1.0, 0.1, 4000, seed=5)
        corr = np.corrcoef(batch.states[:, -1, 0], batch.population[:, -1, 0, 0])[0, 1]
        assert abs(corr) < 4 / np.sqrt(4000)

    def test_overflow_reports_trajectory_and_step(self):
        model = scalar_lqr(A=5.0, B=0.0, gamma=0.0)
        with pytest.raises(SimulationOverflowError) as info:
            simulate_euler(model, passive_policy(), point(1.0), 2.0, 0.1, 2, overflow_bound=10.0)
        err = info.value
        assert err.trajectory == 0
        assert (1.5**err.step > 10.0) and (1.5 ** (err.step - 1) <= 10.0)

    def test_nonfinite_states_count_as_overflow(self):
        model = scalar_lqr(B=0.0, gamma=0.0)
        s0 = np.array([[np.nan]])
        with pytest.raises(SimulationOverflowError):
            propagate_euler(model, passive_policy(), s0, np.zeros((1, 1, 1)), np.zeros((1, 2, 1)),
                            None, 0.1, True)

    @pytest.mark.parametrize("horizon, dt", [(1.0, 0.0), (0.05, 0.1), (1.0, 0.3)])
    def test_bad_grid(self, horizon, dt):
        with pytest.raises(ParameterError):
            simulate_euler(scalar_lqr(), passive_policy(), point(1.0), horizon, dt, 1)

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            simulate_euler(scalar_lqr(), passive_policy(), point(1.0, d=2), 1.0, 0.1, 1)


class TestExact:
    def test_unit_step_transition(self):
        loop = closed_loop_transition(scalar_lqr(B=0.0), passive_policy(), 1, 1.0, True)
        assert loop.transition[0, 0] == pytest.approx(E1, abs=1e-12)
        cov = loop.noise_sqrt @ loop.noise_sqrt.T
        assert cov[0, 0] == pytest.approx(OU_VAR, abs=1e-12)
        # the mean-only block is deterministic
        assert cov[1, 1] == pytest.approx(0.0, abs=1e-15)

    def test_closed_loop_gain_enters_transition(self):
        # A + B w1 = 0 - 1 = -1
        model = scalar_lqr(A=0.0)
        f = AffineFeatureMap.affine(1)
        pol = GaussianPolicy(np.array([[0.0, -1.0, 0.0]]), [[0.1]], f)
        loop = closed_loop_transition(model, pol, 1, 1.0, True)
        assert loop.transition[0, 0] == pytest.approx(E1, abs=1e-12)

    def test_ornstein_uhlenbeck_moments(self):
        batch = simulate_affine_exact(scalar_lqr(B=0.0), passive_policy(), point(1.0), 2.0, 1.0, 20_000, seed=6)
        x = batch.states[:, -1, 0]
        assert abs(x.mean() - E1) <= 3 * x.std() / np.sqrt(x.size)
        assert abs(x.var() / OU_VAR - 1) <= 0.05

    def test_mean_stays_put_without_feedback(self, sysrisk):
        # Abar = -A and omega = 0 leave the population mean at 1
        batch = simulate_affine_exact(sysrisk, sysrisk_policy(0.0, 0.0), point(1.0), 2.0, 0.1, 5)
        np.testing.assert_allclose(batch.population_mean, 1.0, rtol=1e-12)

    def test_mean_follows_exponential(self, sysrisk):
        w2 = -0.7
        batch = simulate_affine_exact(sysrisk, sysrisk_policy(0.0, w2), point(1.0), 2.0, 0.1, 1)
        np.testing.assert_allclose(batch.population_mean[0, :, 0], np.exp(w2 * batch.times), rtol=1e-10)

    def test_particle_system_mean_matches_mean_only(self, sysrisk, sysrisk_optimal):
        parts = InitialCondition([1.0], [[0.0]], [1.0], [[0.0]], n_particles=3)
        a = simulate_affine_exact(sysrisk, sysrisk_optimal, parts, 1.0, 0.1, 4000, seed=1)
        b = simulate_affine_exact(sysrisk, sysrisk_optimal, point(1.0), 1.0, 0.1, 1)
        diff = a.population_mean[:, -1, 0].mean() - b.population_mean[0, -1, 0]
        assert abs(diff) < 4 * a.population_mean[:, -1, 0].std() / np.sqrt(4000)

    def test_rejects_model_without_affine_form(self):
        with pytest.raises(UnsupportedModelError, match="simulate_euler"):
            simulate_affine_exact(ConstantRewardModel(1.0), passive_policy(), point(0.0), 0.1, 0.05, 1)

    def test_rejects_action_dependent_noise(self):
        model = scalar_lqr(F=0.3)
        with pytest.raises(UnsupportedModelError):
            simulate_affine_exact(model, passive_policy(), point(1.0), 1.0, 0.1, 1)
        assert simulate(model, passive_policy(), point(1.0), 1.0, 0.1, 1).method == "euler"

    def test_auto_dispatch(self, sysrisk, crowd_experiment):
        assert simulate(sysrisk, sysrisk_policy(0, 0), point(1.0), 1.0, 0.1, 1).method == "exact"
        # the crowd dynamics are a controlled Brownian motion, hence affine
        exp = crowd_experiment
        assert simulate(exp.model, exp.policy, exp.initial, 0.1, 0.05, 1).method == "exact"
        assert simulate(ConstantRewardModel(1.0), passive_policy(), point(0.0), 0.1, 0.05, 1).method == "euler"
        with pytest.raises(ParameterError):
            simulate(sysrisk, sysrisk_policy(0, 0), point(1.0), 1.0, 0.1, 1, method="rk4")


class TestEulerAgainstExact:
    def test_bias_shrinks_linearly(self, sysrisk):
        # without noise both samplers are deterministic, so the gap is pure bias
        model = LQRModel(A=-1.0, Abar=1.0, B=1.0, gamma=0.0, Q=1.0, Qbar=1.0, N=0.5,
                         temperature=0.2, discount=1.0)
        pol = sysrisk_policy(-0.5, -1.5)
        init = InitialCondition([2.0], [[0.0]], [1.0])
        gaps = []
        for dt in (0.1, 0.05, 0.025):
            e = simulate_euler(model, pol, init, 1.0 + dt, dt, 1)
            x = simulate_affine_exact(model, pol, init, 1.0 + dt, dt, 1)
            gaps.append(abs(e.states[0, -1, 0] - x.states[0, -1, 0]))
        assert gaps[0] > 0
        assert gaps[1] <= 0.55 * gaps[0]
        assert gaps[2] <= 0.55 * gaps[1]

    def test_noisy_means_agree(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        e = simulate_euler(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.025, 20_000, seed=2)
        x = simulate_affine_exact(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.025, 20_000, seed=2)
        se = np.hypot(e.states[:, -1].std(), x.states[:, -1].std()) / np.sqrt(20_000)
        assert abs(e.states[:, -1].mean() - x.states[:, -1].mean()) <= 3 * se + 0.025


class TestDeterminism:
    @pytest.mark.parametrize("method", ["exact", "euler"])
    def test_thread_count_does_not_matter(self, sysrisk, sysrisk_optimal, method):
        init = InitialCondition([1.0], [[1.0]], [1.0], [[0.5]], n_particles=4)
        a = simulate(sysrisk, sysrisk_optimal, init, 1.0, 0.1, 7, seed=11, method=method, threads=1)
        b = simulate(sysrisk, sysrisk_optimal, init, 1.0, 0.1, 7, seed=11, method=method, threads=3)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.population, b.population)
        assert a.seed == b.seed

    def test_seeds_differ(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        a = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.1, 3, seed=0)
        b = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.1, 3, seed=1)
        assert not np.array_equal(a.states, b.states)

    def test_prefix_trajectories_are_stable(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        # per-trajectory streams: adding paths does not change earlier ones
        a = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.1, 3, seed=9)
        b = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 1.0, 0.1, 6, seed=9)
        assert np.array_equal(a.states, b.states[:3])


class TestExchangeability:
    def test_permuting_particles_permutes_paths(self, sysrisk, sysrisk_optimal):
        rng = np.random.default_rng(0)
        P, steps = 5, 20
        s0 = rng.normal(size=(2, 1))
        x0 = rng.normal(size=(2, P, 1))
        rep = rng.normal(size=(2, steps, 1))
        pop = rng.normal(size=(2, P, steps, 1))
        perm = rng.permutation(P)
        s_a, x_a = propagate_euler(sysrisk, sysrisk_optimal, s0, x0, rep, pop, 0.05, False)
        s_b, x_b = propagate_euler(sysrisk, sysrisk_optimal, s0, x0[:, perm], rep, pop[:, perm], 0.05, False)
        # only the summation order inside the empirical mean differs
        np.testing.assert_allclose(x_b, x_a[:, :, perm], rtol=0, atol=1e-13)
        np.testing.assert_allclose(s_b, s_a, rtol=0, atol=1e-13)


class TestOccupancy:
    @pytest.fixture
    def batch(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        return simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 3 * 0.05, 0.05, 2, seed=0)

    def test_single_point_weight_is_dt(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        b = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 0.05, 0.05, 1)
        occ = occupancy_samples(b, "discounted", 1.0)
        assert occ.size == 1 and occ.weights[0] == 0.05

    def test_uniform(self, batch):
        occ = occupancy_samples(batch, "uniform")
        assert occ.size == 6
        assert np.all(occ.weights == 1 / 6)

    def test_discounted_formula(self, batch):
        occ = occupancy_samples(batch, "discounted", 1.0)
        np.testing.assert_array_equal(occ.weights, np.tile(np.exp(-batch.times) * 0.05 / 2, 2))

    def test_weight_at_unit_time(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        b = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 1.05, 0.05, 1)
        occ = occupancy_samples(b, "discounted", 1.0)
        assert occ.weights[20] == pytest.approx(0.0183940, abs=5e-8)

    def test_flattening_order(self, batch):
        occ = occupancy_samples(batch)
        np.testing.assert_array_equal(occ.trajectory, [0, 0, 0, 1, 1, 1])
        np.testing.assert_array_equal(occ.states, batch.states.reshape(6, 1))
        assert occ.measure.particles.shape == (6, 1, 1)

    def test_unknown_mode(self, batch):
        with pytest.raises(ParameterError):
            occupancy_samples(batch, "stationary")

    @settings(max_examples=30, deadline=None)
    @given(beta=st.floats(0.05, 3.0), dt=st.sampled_from([0.01, 0.02, 0.05, 0.1]),
           n=st.integers(5, 200), L=st.integers(1, 4))
    def test_discounted_mass_close_to_integral(self, beta, dt, n, L):
        model = scalar_lqr(B=0.0, gamma=0.0, discount=beta)
        b = simulate(model, passive_policy(), point(0.0), n * dt, dt, L)
        occ = occupancy_samples(b, "discounted", beta)
        T = n * dt
        integral = (1 - np.exp(-beta * T)) / beta
        assert np.all(occ.weights >= 0)
        assert abs(occ.weights.sum() - integral) <= beta * dt * integral + 1e-12


class TestEstimateValue:
    def test_zero_reward_is_exactly_zero(self):
        model = ConstantRewardModel(0.0)
        est = estimate_value(model, passive_policy(), point(0.0), 2.0, 0.1, 5)
        assert est.value == 0.0 and est.std_err == 0.0

    def test_constant_reward_integrates_the_discount(self):
        model = ConstantRewardModel(1.0)
        dt = 0.01
        est = estimate_value(model, passive_policy(), point(0.0), 8.0, dt, 2)
        target = 1 - np.exp(-8.0)
        assert target == pytest.approx(0.9996645, abs=1e-7)
        # the left Riemann sum of exp(-t) is a geometric series
        riemann = dt * (1 - np.exp(-8.0)) / (1 - np.exp(-dt))
        assert est.value == pytest.approx(riemann, rel=1e-12)
        # its error is dt/2 + dt^2/12 + O(dt^3), just above the first-order bound dt/2
        assert abs(est.value - target) <= dt / 2 * (1 + dt / 6) * target

    def test_entropy_bonus_counts_as_reward(self):
        pol = passive_policy()
        model = ConstantRewardModel(0.0)
        model.temperature = 1.0 / pol.entropy()
        est = estimate_value(model, pol, point(0.0), 8.0, 0.01, 2)
        riemann = 0.01 * (1 - np.exp(-8.0)) / (1 - np.exp(-0.01))
        assert est.value == pytest.approx(riemann, rel=1e-12)

    def test_optimal_policy_matches_riccati_value(self, sysrisk, sysrisk_optimal, sysrisk_solution):
        from mfac.riccati import optimal_value

        v_star = float(optimal_value(sysrisk_solution, sysrisk, np.array([1.0]), np.array([1.0])))
        assert v_star == pytest.approx(-0.8281266, abs=1e-7)
        est = estimate_value(sysrisk, sysrisk_optimal, point(1.0), 8.0, 0.01, 4000, seed=0)
        tail = np.exp(-8.0) * abs(v_star)
        # the left Riemann sum over-weights the start: error ~ dt/2 * r(s0, mu0)
        r0 = regularized_reward(sysrisk_optimal, sysrisk, np.array([1.0]), np.array([1.0]))
        grid = 0.01 / 2 * abs(float(r0)) * 1.01
        assert abs(est.value - v_star) <= 3 * est.std_err + tail + grid

    def test_standard_error_scales_with_paths(self, sysrisk, sysrisk_optimal, sysrisk_initial):
        a = estimate_value(sysrisk, sysrisk_optimal, sysrisk_initial, 4.0, 0.05, 500, seed=1)
        b = estimate_value(sysrisk, sysrisk_optimal, sysrisk_initial, 4.0, 0.05, 2000, seed=1)
        assert a.std_err / b.std_err == pytest.approx(2.0, rel=0.15)

    def test_monte_carlo_reward_needs_no_closed_form(self):
        model = ConstantRewardModel(2.0, discount=0.5)
        est = estimate_value(model, passive_policy(), point(0.0), 1.0, 0.5, 1)
        assert est.value == pytest.approx(2.0 * 0.5 * (1 + np.exp(-0.25)))
        assert np.isnan(est.std_err)


def test_csv_export(tmp_path, sysrisk, sysrisk_optimal, sysrisk_initial):
    b = simulate(sysrisk, sysrisk_optimal, sysrisk_initial, 0.2, 0.1, 2, seed=0)
    path = tmp_path / "paths.csv"
    b.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["trajectory", "step", "time", "s1", "mbar1"]
    assert len(rows) == 1 + 2 * 2
    assert float(rows[3][3]) == b.states[1, 0, 0]
    assert float(rows[4][4]) == b.population_mean[1, 1, 0]
