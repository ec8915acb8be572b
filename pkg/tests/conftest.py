import numpy as np
import pytest

from chunkflow.sim import default_fleet
from chunkflow.unified_space import default_layout


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture(scope="session")
def fleet(layout):
    return default_fleet(layout)
