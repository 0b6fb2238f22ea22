import numpy as np
import pytest

from domino import ndgrad


@pytest.fixture
def f64():
    """Run the test with float64 as the default array dtype."""
    prev = ndgrad.get_default_dtype()
    ndgrad.set_default_dtype(np.float64)
    yield
    ndgrad.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
