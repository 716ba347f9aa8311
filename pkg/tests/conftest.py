import numpy as np
import pytest

from magstrich.grid import make_grid


@pytest.fixture(scope="session")
def g16():
    return make_grid(16, 4.0)


@pytest.fixture(scope="session")
def g32():
    return make_grid(32, 4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
