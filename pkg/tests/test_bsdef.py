import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbsdef import density as dens
from kbsdef.bsdef import (
    BsdefConfig,
    ContractionWarning,
    FilterDivergenceError,
    FilteringState,
    SampleCloud,
    bayes_update,
    filter_step,
    fixed_point_iterate,
    initial_mixture,
    initial_state,
    predict_at_point,
    predict_at_points,
    read_checkpoint,
    run_filter,
)
from kbsdef.density import GaussianMixture
from kbsdef.kalman import kalman_filter
from kbsdef.models import StateModel, linear_observation, ornstein_uhlenbeck_model, synthetic_model
from kbsdef.sde import RngStream


def frozen_model(d=1, div=0.0):
    return StateModel("frozen", d, lambda x: np.zeros(np.shape(x)), np.zeros(d),
                      lambda x: np.full(np.shape(x)[:-1], div))


class TestPrediction:
    def test_frozen_dynamics_return_previous_density(self):
        p = GaussianMixture([[0.0, 1.0], [1.0, -1.0]], [0.7, 0.2], [[1.0, 0.5], [0.3, 2.0]])
        x = np.array([0.4, 0.1])
        assert predict_at_point(frozen_model(2), p, x, 0.1, 10, RngStream(0)) == pytest.approx(p(x), rel=1e-12)

    def test_frozen_expectation_affine_fixed_point(self):
        # E = 1 and dt * div = -0.2: Y = 1 + 0.2 Y has fixed point 1.25
        y = fixed_point_iterate(np.ones(10), -0.2, 1.25)
        assert y == pytest.approx(1.25)
        y_from_one = fixed_point_iterate(np.ones(60), -0.2, 1.0)
        assert y_from_one == pytest.approx(1.25, rel=1e-12)

    def test_frozen_expectation_converges_geometrically(self):
        coef = -0.2
        ys = [0.0]
        for _ in range(8):
            ys.append(fixed_point_iterate(np.ones(1), coef, ys[-1]))
        steps = np.abs(np.diff(ys))
        np.testing.assert_allclose(steps[1:] / steps[:-1], abs(coef), rtol=1e-6)

    def test_through_predict_with_constant_density(self):
        # a very wide kernel is constant to machine precision near the origin
        p = GaussianMixture([[0.0]], [1.0], [[1e9]])
        model = frozen_model(1, div=-2.0)
        y = predict_at_point(model, p, np.array([0.0]), 0.1, 60, RngStream(1))
        assert y == pytest.approx(1.25, rel=1e-9)

    @given(st.floats(0.1, 10), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_linear_in_weights(self, c, seed):
        p = GaussianMixture([[0.0, 0.5]], [0.8], [[1.0, 1.5]])
        x = np.array([[0.2, 0.3], [1.0, -0.5]])
        model = synthetic_model()
        base = predict_at_points(model, p, x, 0.05, 10, RngStream(seed))
        scaled = predict_at_points(model, p.replace(weights=c * p.weights), x, 0.05, 10, RngStream(seed))
        np.testing.assert_allclose(scaled, c * base, rtol=1e-10)

    def test_point_and_batch_agree(self):
        p = GaussianMixture([[0.0]], [1.0], [[1.0]])
        m = ornstein_uhlenbeck_model()
        a = predict_at_points(m, p, np.array([[0.3]]), 0.1, 10, RngStream(2))[0]
        b = predict_at_point(m, p, np.array([0.3]), 0.1, 10, RngStream(2))
        assert a == b

    @pytest.mark.parametrize("mode", ["batch", "single", "mc"])
    def test_modes_are_nonnegative_and_finite(self, mode):
        p = GaussianMixture([[0.0, 0.0]], [1.0], [[0.5, 0.5]])
        x = np.random.default_rng(3).normal(size=(50, 2))
        y = predict_at_points(synthetic_model(), p, x, 0.05, 10, RngStream(3), mode, mc_samples=50)
        assert np.all(np.isfinite(y)) and np.all(y >= 0)

    def test_contraction_warning(self):
        p = GaussianMixture([[0.0]], [1.0], [[1.0]])
        with pytest.warns(ContractionWarning):
            predict_at_point(frozen_model(1, div=-20.0), p, np.array([0.0]), 0.1, 3, 0)

    def test_invalid_arguments(self):
        p = GaussianMixture([[0.0]], [1.0], [[1.0]])
        with pytest.raises(ValueError):
            predict_at_point(frozen_model(), p, np.array([0.0]), 0.1, 0, 0)
        with pytest.raises(ValueError):
            predict_at_point(frozen_model(), p, np.array([0.0]), 0.1, 5, 0, mode="exact")
        with pytest.raises(FloatingPointError):
            predict_at_point(frozen_model(), p, np.array([np.nan]), 0.1, 5, 0)


class TestBayesUpdate:
    def test_constant_likelihood(self):
        obs = linear_observation(1, 1e6)
        predicted = np.array([0.2, 0.5, 1.3])
        out = bayes_update(predicted, obs, np.array([0.0]), np.array([[0.0], [0.1], [0.2]]))
        np.testing.assert_allclose(out, predicted, rtol=1e-9)

    def test_flat_prior_gives_likelihood_shape(self):
        obs = linear_observation(1, 0.5)
        pts = np.array([[0.0], [0.5], [1.0], [2.0]])
        out = bayes_update(np.ones(4), obs, np.array([0.4]), pts)
        lik = obs.likelihood(np.array([0.4]), pts)
        np.testing.assert_allclose(out, lik / lik.mean())

    def test_two_point_arithmetic(self):
        class Fixed:
            def log_likelihood(self, m, x):
                return np.log(np.array([0.2, 0.6]))

        np.testing.assert_allclose(bayes_update(np.ones(2), Fixed(), None, np.zeros((2, 1))), [0.5, 1.5])

    @given(st.floats(1e-6, 1e6), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance_after_normalisation(self, c, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(20, 2))
        pred = rng.uniform(0.01, 1.0, 20)
        obs = linear_observation(2, 0.7)
        a = bayes_update(pred, obs, np.zeros(2), pts)
        b = bayes_update(c * pred, obs, np.zeros(2), pts)
        np.testing.assert_allclose(b / b.mean(), a / a.mean(), rtol=1e-9)
        assert a.mean() == pytest.approx(pred.mean())

    def test_vanishing_posterior_is_divergence(self):
        obs = linear_observation(1, 0.1)
        with pytest.raises(FilterDivergenceError):
            bayes_update(np.zeros(3), obs, np.array([0.0]), np.zeros((3, 1)))

    def test_extreme_likelihoods_do_not_underflow(self):
        obs = linear_observation(1, 1e-3)
        out = bayes_update(np.ones(2), obs, np.array([10.0]), np.array([[0.0], [0.5]]))
        np.testing.assert_allclose(out, [0.0, 2.0])


class TestInitialMixture:
    def test_zero_valued_centers_start_at_weight_floor(self):
        cfg = BsdefConfig(n_kernels=3, bandwidth_init="adaptive")
        centers = np.array([[0.0], [1.0], [5.0]])
        m = initial_mixture(centers, GaussianMixture([[0.0]], [1.0], [[1.0]]), cfg, 1.0, np.array([1.0, 0.5, 0.0]))
        np.testing.assert_array_equal(m.weights, [cfg.init_weight, cfg.init_weight, 1e-8])
        np.testing.assert_allclose(m.bandwidths, np.sqrt(2.0) * 0.5)

    def test_fixed_uses_configured_guesses(self):
        cfg = BsdefConfig(n_kernels=2, init_weight=0.5, init_bandwidth=2.0, bandwidth_init="fixed")
        m = initial_mixture(np.array([[0.0], [1.0]]), GaussianMixture([[0.0]], [1.0], [[1.0]]), cfg)
        np.testing.assert_array_equal(m.weights, [0.5, 0.5])
        np.testing.assert_array_equal(m.bandwidths, [[2.0], [2.0]])

    def test_warm_start_matches_nearest_previous_kernel(self):
        prev = GaussianMixture([[0.0], [10.0]], [1.0, 3.0], [[0.5], [4.0]])
        cfg = BsdefConfig(n_kernels=2, bandwidth_init="warm")
        m = initial_mixture(np.array([[9.0], [1.0]]), prev, cfg, scale=2.0)
        np.testing.assert_array_equal(m.weights, [1.5, 0.5])
        np.testing.assert_array_equal(m.bandwidths, [[4.0], [0.5]])

    def test_warm_start_falls_back_when_kernel_count_changes(self):
        prev = GaussianMixture([[0.0]], [1.0], [[0.5]])
        cfg = BsdefConfig(n_kernels=2, bandwidth_init="warm", init_bandwidth=3.0)
        m = initial_mixture(np.array([[0.0], [1.0]]), prev, cfg)
        np.testing.assert_array_equal(m.bandwidths, [[3.0], [3.0]])

    def test_adaptive_bandwidth_from_center_spread(self):
        centers = np.array([[0.0, 0.0], [2.0, 4.0]])
        cfg = BsdefConfig(n_kernels=2, bandwidth_init="adaptive")
        m = initial_mixture(centers, GaussianMixture([[0.0, 0.0]], [1.0], [[1.0, 1.0]]), cfg)
        np.testing.assert_allclose(m.bandwidths, np.sqrt(2.0) * np.array([[1.0, 2.0], [1.0, 2.0]]))


class TestFilterStep:
    def test_reproducible_under_fixed_seed(self):
        cfg = BsdefConfig(n_samples=100, n_kernels=3, dt=0.1)
        p0 = GaussianMixture.gaussian([0.0, 0.0], [0.2, 0.2])
        obs = linear_observation(2, 0.05)
        runs = []
        for _ in range(2):
            state = initial_state(p0, cfg, RngStream(4))
            runs.append(filter_step(state, synthetic_model(), obs, np.array([0.0, 0.2]), cfg, RngStream(4)))
        np.testing.assert_array_equal(runs[0].cloud.points, runs[1].cloud.points)
        np.testing.assert_array_equal(runs[0].density.weights, runs[1].density.weights)
        assert runs[0].step_index == 1

    def test_noise_free_limit_collapses_on_observation(self):
        # frozen noiseless dynamics observed repeatedly with a vanishing noise scale
        model = frozen_model(1)
        obs = linear_observation(1, 1e-5)
        cfg = BsdefConfig(n_samples=300, n_kernels=3, dt=0.1)
        state = initial_state(GaussianMixture.gaussian([0.0], [1.0]), cfg, RngStream(5))
        target = np.array([0.3])
        for _ in range(40):
            state = filter_step(state, model, obs, target, cfg, RngStream(5))
        assert abs(dens.mixture_mean(state.density)[0] - target[0]) < 2 * dens.LAMBDA_FLOOR
        assert np.all(state.density.bandwidths < 2 * dens.LAMBDA_FLOOR)

    def test_prediction_only_step(self):
        cfg = BsdefConfig(n_samples=50, n_kernels=2, dt=0.1)
        state = initial_state(GaussianMixture.gaussian([1.0], [0.5]), cfg, RngStream(6))
        nxt = filter_step(state, ornstein_uhlenbeck_model(), None, None, cfg, RngStream(6))
        assert nxt.step_index == 1 and nxt.density.total_mass() == pytest.approx(1.0)

    def test_values_stay_nonnegative(self):
        cfg = BsdefConfig(n_samples=80, n_kernels=3, dt=0.1)
        model, obs = synthetic_model(), linear_observation(2, 0.05)
        state = initial_state(GaussianMixture.gaussian([0.0, 0.0], [0.2, 0.2]), cfg, RngStream(7))
        for n in range(5):
            state = filter_step(state, model, obs, np.array([0.1 * n, 0.2 * n]), cfg, RngStream(7))
            assert np.all(state.cloud.values >= 0) and np.all(state.training.values >= 0)
            assert np.all(state.density.weights > 0) and np.all(state.density.bandwidths > 0)


class TestRunFilter:
    def test_no_observations(self):
        p0 = GaussianMixture.gaussian([0.5], [1.0])
        res = run_filter(ornstein_uhlenbeck_model(), linear_observation(1, 0.1), np.empty((0, 1)),
                         BsdefConfig(n_samples=20, n_kernels=2), p0)
        assert res.estimates.shape == (1, 1) and not res.failed
        np.testing.assert_allclose(res.estimates[0], [0.5])

    def test_single_step_matches_kalman(self):
        model, obs = ornstein_uhlenbeck_model(1, 1.0, 0.3), linear_observation(1, 0.2)
        cfg = BsdefConfig(n_samples=500, n_kernels=3, dt=0.1, init_bandwidth=0.5)
        p0 = GaussianMixture.gaussian([1.0], [0.5])
        errs = []
        for seed in range(20):
            y = np.array([[1.0 + 0.3 * np.random.default_rng(seed).standard_normal()]])
            km, _ = kalman_filter(model, obs, y, 0.1, 1.0, 0.5)
            res = run_filter(model, obs, y, cfg, p0, RngStream(seed))
            errs.append(res.estimates[1, 0] - km[1, 0])
        assert abs(np.mean(errs)) < 0.1

    def test_divergence_is_reported_as_failure(self):
        # the backward step from every propagated point lands where the previous density underflows
        model = StateModel("blowup", 1, lambda x: 50.0 * np.asarray(x) ** 2, np.zeros(1))
        res = run_filter(model, linear_observation(1, 0.1), np.array([[6.0], [6.0]]),
                         BsdefConfig(n_samples=30, n_kernels=2, dt=0.1),
                         GaussianMixture.gaussian([1.0], [0.01]), RngStream(8))
        assert res.failed and res.failed_step == 1 and res.estimates.shape == (1, 1)

    def test_checkpoints_round_trip(self, tmp_path):
        cfg = BsdefConfig(n_samples=30, n_kernels=2, dt=0.1)
        p0 = GaussianMixture.gaussian([0.0], [0.5])
        res = run_filter(ornstein_uhlenbeck_model(), linear_observation(1, 0.2), np.array([[0.1], [0.2]]), cfg,
                         p0, RngStream(9), checkpoint_dir=tmp_path)
        files = sorted(tmp_path.iterdir())
        assert [f.name for f in files] == ["step_00000.txt", "step_00001.txt", "step_00002.txt"]
        mix, cloud = read_checkpoint(files[-1])
        np.testing.assert_array_equal(mix.weights, res.densities[-1].weights)
        assert cloud.points.shape == (30, 1) and isinstance(cloud, SampleCloud)


def test_config_validation():
    with pytest.raises(ValueError):
        BsdefConfig(n_samples=0)
    with pytest.raises(ValueError):
        BsdefConfig(n_samples=3, n_kernels=4)
    with pytest.raises(ValueError):
        BsdefConfig(dt=0.0)
    with pytest.raises(ValueError):
        BsdefConfig(expectation="exact")
    assert BsdefConfig(lr=0.1, lr_lambda=0.2).lr_bandwidth == 0.2


def test_filtering_state_is_plain_value():
    state = FilteringState(SampleCloud(np.zeros((1, 1)), np.ones(1)), GaussianMixture([[0.0]], [1.0], [[1.0]]))
    assert state.step_index == 0 and state.training is None
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert state.diagnostics == {}
