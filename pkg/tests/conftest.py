import numpy as np
import pytest

from retraj.prompts import GridMeta
from retraj.synth import SynthConfig, generate_network, generate_trajectories


@pytest.fixture(scope="session")
def grid4():
    """4x4 intersection grid, 200 m cells, both directions per street."""
    return generate_network(SynthConfig(grid_nodes=4, seed=0))


@pytest.fixture(scope="session")
def records4(grid4):
    cfg = SynthConfig(grid_nodes=4, n_traj=6, min_slots=20, max_slots=40, seed=1)
    return generate_trajectories(grid4, cfg)


@pytest.fixture(scope="session")
def meta4(grid4):
    lat_min, lat_max, lng_min, lng_max = grid4.bounds
    return GridMeta(lat_min, lat_max, lng_min, lng_max, rows=4, cols=4, slices=24)


def dense_matched(records):
    """Ground-truth matched trajectories from synthetic records."""
    return [r.matched for r in records if r.matched is not None]


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
