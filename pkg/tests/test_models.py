import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pismooth import (
    DiffusionModel,
    GaussianObservationModel,
    InitialStateDistribution,
    Neural5Params,
    NumericalError,
    ObservationSeries,
    SingularDiffusionError,
    TimeGrid,
    brownian_model,
    gaussian_transition_logdensity,
    log_obs_likelihood,
    neural5_model,
    sample_noise,
    step_euler_maruyama,
)

LOG_2PI = np.log(2 * np.pi)


def constant_model(drift_fn, diffusion_matrix):
    g = np.asarray(diffusion_matrix, dtype=float)
    return DiffusionModel(
        state_dim=g.shape[0],
        noise_dim=g.shape[1],
        drift=drift_fn,
        diffusion=lambda x, t: g,
    )


class TestTimeGrid:
    def test_basic(self):
        grid = TimeGrid.from_horizon(1.0, 0.01)
        assert grid.num_steps == 100
        assert grid.horizon == pytest.approx(1.0, abs=1e-14)
        assert np.allclose(grid.times(), np.arange(101) * 0.01)

    def test_rejects_non_multiple(self):
        with pytest.raises(ValueError):
            TimeGrid.from_horizon(1.0, 0.03)

    def test_rejects_bad_steps(self):
        with pytest.raises(ValueError):
            TimeGrid(dt=-0.1, num_steps=10)
        with pytest.raises(ValueError):
            TimeGrid(dt=0.1, num_steps=0)

    def test_index_of_rejects_off_grid(self):
        grid = TimeGrid(0.01, 100)
        assert grid.index_of(0.25) == 25
        with pytest.raises(ValueError):
            grid.index_of(0.255)


class TestStepEulerMaruyama:
    def test_zero_increment_identity(self):
        model = constant_model(lambda x, t: np.zeros_like(x), [[1.0]])
        out = step_euler_maruyama(model, np.array([1.0]), 0.0, np.array([0.0]), np.array([0.0]), 0.01)
        assert out == pytest.approx([1.0])

    def test_linear_drift(self):
        model = constant_model(lambda x, t: -x, [[1.0]])
        out = step_euler_maruyama(model, np.array([1.0]), 0.0, np.array([0.0]), np.array([0.0]), 0.01)
        assert out == pytest.approx([0.99])

    def test_control_and_noise(self):
        model = constant_model(lambda x, t: np.zeros_like(x), [[1.0]])
        out = step_euler_maruyama(model, np.array([0.0]), 0.0, np.array([2.0]), np.array([0.05]), 0.01)
        assert out == pytest.approx([0.07])

    def test_batched_matches_single(self):
        model = constant_model(lambda x, t: -0.5 * x, [[0.4, 0.1], [0.0, 0.3]])
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 2))
        u = rng.normal(size=(7, 2))
        dw = rng.normal(size=(7, 2))
        batched = step_euler_maruyama(model, x, 0.3, u, dw, 0.05)
        single = np.stack(
            [step_euler_maruyama(model, x[i], 0.3, u[i], dw[i], 0.05) for i in range(7)]
        )
        assert np.allclose(batched, single)

    def test_nonfinite_drift_reports_term(self):
        model = constant_model(lambda x, t: x * np.inf, [[1.0]])
        with pytest.raises(NumericalError, match="drift"):
            step_euler_maruyama(model, np.array([1.0]), 0.0, np.array([0.0]), np.array([0.0]), 0.01)

    def test_nonfinite_diffusion_reports_term(self):
        model = constant_model(lambda x, t: np.zeros_like(x), [[np.nan]])
        with pytest.raises(NumericalError, match="diffusion"):
            step_euler_maruyama(model, np.array([1.0]), 0.0, np.array([0.0]), np.array([0.0]), 0.01)

    def test_one_step_kernel_moments(self):
        # linear drift, constant diffusion: mean x + F dt, covariance gg' dt
        a = np.array([[-1.0, 0.5], [0.0, -0.5]])
        g = np.array([[0.3, 0.1], [0.0, 0.2]])
        model = constant_model(lambda x, t: x @ a.T, g)
        dt = 0.01
        x = np.array([0.7, -0.2])
        draws = 1_000_000
        rng = np.random.default_rng(42)
        dw = rng.standard_normal((draws, 2)) * np.sqrt(dt)
        out = step_euler_maruyama(model, np.tile(x, (draws, 1)), 0.0, 0.0, dw, dt)
        expected_mean = x + a @ x * dt
        se = out.std(axis=0, ddof=1) / np.sqrt(draws)
        assert np.all(np.abs(out.mean(axis=0) - expected_mean) < 4 * se)
        expected_cov = g @ g.T * dt
        emp_cov = np.cov(out.T)
        assert np.all(np.abs(emp_cov - expected_cov) < 0.05 * np.abs(expected_cov) + 1e-12)


class TestSampleNoise:
    def test_moments(self):
        rng = np.random.default_rng(7)
        draws = np.array([sample_noise(rng, 1, 0.01)[0] for _ in range(1000)])
        big = np.random.default_rng(8).standard_normal(1_000_000) * np.sqrt(0.01)
        assert abs(big.mean()) < 3e-4
        assert big.var() == pytest.approx(0.01, rel=0.01)
        assert draws.var() == pytest.approx(0.01, rel=0.2)

    def test_seed_determinism(self):
        a = [sample_noise(np.random.default_rng(3), 4, 0.5) for _ in range(2)]
        b = [sample_noise(np.random.default_rng(3), 4, 0.5) for _ in range(2)]
        assert np.array_equal(a[0], b[0])

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            sample_noise(np.random.default_rng(0), 1, 0.0)


class TestLogObsLikelihood:
    def test_at_mode(self):
        om = GaussianObservationModel((0,), np.array([1.0]))
        assert log_obs_likelihood(om, [1.3], np.array([1.3])) == pytest.approx(-0.5 * LOG_2PI)

    def test_unlikely_offset(self):
        om = GaussianObservationModel((0,), np.array([1.0]))
        val = log_obs_likelihood(om, [5.0], np.array([0.0]))
        assert val == pytest.approx(-0.5 * LOG_2PI - 12.5)

    def test_two_coords_additivity(self):
        om = GaussianObservationModel((0, 1), np.array([1.0, 1.0]))
        assert log_obs_likelihood(om, [0.2, -0.4], np.array([0.2, -0.4])) == pytest.approx(-LOG_2PI)

    def test_maximized_at_observation(self):
        om = GaussianObservationModel((1,), np.array([0.7]))
        y = [0.3]
        grid = np.linspace(-3, 3, 601)
        states = np.zeros((grid.size, 2))
        states[:, 1] = grid
        values = log_obs_likelihood(om, y, states)
        assert grid[np.argmax(values)] == pytest.approx(0.3, abs=0.011)

    def test_partial_observation_selects_coords(self):
        om = GaussianObservationModel((2,), np.array([1.0]))
        x = np.array([9.0, -9.0, 1.0])
        assert log_obs_likelihood(om, [1.0], x) == pytest.approx(-0.5 * LOG_2PI)


class TestTransitionLogdensity:
    def test_normalizer(self):
        model = brownian_model(1.0, 1)
        val = gaussian_transition_logdensity(model, np.array([0.3]), np.array([0.3]), 0.0, 0.01)
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi * 0.01))

    def test_quadratic_term(self):
        model = brownian_model(1.0, 1)
        val = gaussian_transition_logdensity(model, np.array([0.4]), np.array([0.3]), 0.0, 0.01)
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi * 0.01) - 0.5)

    def test_singular_diffusion_rejected(self):
        model = constant_model(lambda x, t: np.zeros_like(x), [[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(SingularDiffusionError):
            gaussian_transition_logdensity(model, np.zeros(2), np.zeros(2), 0.0, 0.01)

    def test_integrates_to_one(self):
        model = constant_model(lambda x, t: -2.0 * x, [[0.8]])
        dt = 0.05
        x = np.array([0.4])
        grid = np.linspace(-2.5, 3.5, 40001)
        dens = np.exp(
            [gaussian_transition_logdensity(model, np.array([v]), x, 0.0, dt) for v in grid[::40]]
        )
        mass = np.trapezoid(dens, grid[::40])
        assert mass == pytest.approx(1.0, abs=1e-6)


class TestObservationSeries:
    def test_rejects_off_grid_times(self):
        grid = TimeGrid(0.01, 100)
        om = GaussianObservationModel((0,), np.array([1.0]))
        with pytest.raises(ValueError):
            ObservationSeries.from_times(grid, [0.0, 0.503], [[0.0], [1.0]], om)

    def test_requires_terminal_entry(self):
        grid = TimeGrid(0.01, 100)
        om = GaussianObservationModel((0,), np.array([1.0]))
        with pytest.raises(ValueError, match="final"):
            ObservationSeries(grid, (0, 50), np.array([[0.0], [1.0]]), om)

    def test_requires_increasing_indices(self):
        grid = TimeGrid(0.01, 100)
        om = GaussianObservationModel((0,), np.array([1.0]))
        with pytest.raises(ValueError, match="increasing"):
            ObservationSeries(grid, (50, 50, 100), np.zeros((3, 1)), om)

    def test_empty_series_allowed(self):
        grid = TimeGrid(0.01, 100)
        om = GaussianObservationModel((0,), np.array([1.0]))
        series = ObservationSeries(grid, (), np.empty((0, 1)), om)
        assert series.count == 0


class TestInitialStateDistribution:
    def test_delta_sampling(self):
        dist = InitialStateDistribution.delta([1.0, -2.0])
        out = dist.sample(np.random.default_rng(0), 5)
        assert np.all(out == np.array([1.0, -2.0]))

    def test_gaussian_moments(self):
        dist = InitialStateDistribution.gaussian([1.0], [4.0])
        out = dist.sample(np.random.default_rng(0), 200_000)
        assert out.mean() == pytest.approx(1.0, abs=0.02)
        assert out.var() == pytest.approx(4.0, rel=0.02)

    def test_delta_has_no_density(self):
        with pytest.raises(ValueError):
            InitialStateDistribution.delta([0.0]).log_density(np.zeros((2, 1)))

    @given(st.floats(-3, 3), st.floats(0.1, 5))
    def test_gaussian_log_density(self, mean, var):
        dist = InitialStateDistribution.gaussian([mean], [var])
        x = np.array([[mean + 0.3]])
        expected = -0.5 * (np.log(2 * np.pi * var) + 0.09 / var)
        assert dist.log_density(x)[0] == pytest.approx(expected)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            InitialStateDistribution.gaussian([0.0], [0.0])


class TestObservationModel:
    def test_rejects_empty_indices(self):
        with pytest.raises(ValueError):
            GaussianObservationModel((), np.array([]))

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            GaussianObservationModel((0, 0), np.array([1.0, 1.0]))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GaussianObservationModel((0,), np.array([0.0]))


class TestNeural5:
    def test_antisymmetry_enforced(self):
        bad = np.ones((5, 5))
        with pytest.raises(ValueError, match="antisymmetric"):
            Neural5Params(B=bad, theta=np.zeros(5), A=np.zeros(5), omega=np.zeros(5))

    def test_sample_is_antisymmetric(self):
        params = Neural5Params.sample(np.random.default_rng(5))
        assert np.allclose(params.B, -params.B.T)
        assert np.all(np.diag(params.B) == 0)

    def test_json_round_trip(self, tmp_path):
        params = Neural5Params.sample(np.random.default_rng(5))
        path = tmp_path / "params.json"
        params.to_json(path)
        loaded = Neural5Params.from_json(path)
        assert np.array_equal(loaded.B, params.B)
        assert np.array_equal(loaded.omega, params.omega)

    def test_json_missing_field(self, tmp_path):
        path = tmp_path / "params.json"
        path.write_text(json.dumps({"B": np.zeros((5, 5)).tolist()}))
        with pytest.raises(ValueError, match="missing"):
            Neural5Params.from_json(path)

    def test_drift_shape_and_value(self):
        params = Neural5Params.sample(np.random.default_rng(5))
        model = neural5_model(params, 0.05)
        x = np.random.default_rng(1).normal(size=(3, 5))
        drift = model.drift(x, 0.7)
        assert drift.shape == (3, 5)
        expected = -x[0] + np.tanh(params.B @ x[0] + params.theta + params.A * np.sin(params.omega * 0.7))
        assert np.allclose(drift[0], expected)

    def test_diffusion_is_scaled_identity(self):
        params = Neural5Params.sample(np.random.default_rng(5))
        model = neural5_model(params, 0.05)
        assert np.allclose(model.diffusion(np.zeros(5), 0.0), np.sqrt(0.05) * np.eye(5))
