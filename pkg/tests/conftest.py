import numpy as np
import pytest
import torch

from copamap.data import GridSpec, OccupancyGrid

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def empty_room():
    """20 m x 20 m room without obstacles, 0.5 m map resolution."""
    occ = OccupancyGrid((0.0, 0.0), 0.5, np.zeros((40, 40), dtype=bool))
    return occ, GridSpec.for_map(occ, r_s=1.0, tau=3600.0)


@pytest.fixture(scope="session")
def walled_room():
    """12 m x 8 m room with a vertical wall at x in [6, 6.5), y in [2, 8)."""
    cells = np.zeros((16, 24), dtype=bool)
    cells[4:, 12] = True
    occ = OccupancyGrid((0.0, 0.0), 0.5, cells)
    return occ, GridSpec.for_map(occ, r_s=1.0, tau=600.0)
