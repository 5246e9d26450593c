import numpy as np
import pytest

from pismooth import (
    GaussianObservationModel,
    InitialStateDistribution,
    ObservationSeries,
    TimeGrid,
    brownian_model,
)


@pytest.fixture
def lq_problem():
    """The unlikely-terminal-observation setup used throughout."""
    grid = TimeGrid.from_horizon(1.0, 0.01)
    model = brownian_model(1.0, 1)
    obs_model = GaussianObservationModel((0,), np.array([1.0]))
    obs = ObservationSeries(grid, (0, 100), np.array([[0.0], [5.0]]), obs_model)
    prior = InitialStateDistribution.gaussian([0.0], [4.0])
    return model, obs, prior


def make_lq_obs(grid, values, indices, obs_var=1.0):
    obs_model = GaussianObservationModel((0,), np.array([obs_var]))
    return ObservationSeries(grid, tuple(indices), np.asarray(values, dtype=float)[:, None], obs_model)
