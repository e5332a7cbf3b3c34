import numpy as np
import pytest

from crashsampler import GridConfig, SimParams, build_grid, build_ground_truth


@pytest.fixture(scope="session")
def default_grid():
    return build_grid(GridConfig())


@pytest.fixture(scope="session")
def ground_truth(default_grid):
    return build_ground_truth(default_grid)


@pytest.fixture(scope="session")
def toy_grid():
    """2 events x 3 OEOFF x 2 decel; small enough for exhaustive enumeration.

    Seed chosen so each case has a non-crash cell and several distinct crash
    outcomes (keeps the ratio-estimator bias bound non-degenerate).
    """
    config = GridConfig(n_events=2, oeoff_levels=(0.0, 1.0, 6.6),
                        decel_levels=(3.75, 10.75), rng_seed=3)
    return build_grid(config)


@pytest.fixture(scope="session")
def toy_ground_truth(toy_grid):
    return build_ground_truth(toy_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
