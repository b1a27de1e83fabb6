import numpy as np
import pytest

from polykerv import autograd as ag


@pytest.fixture
def f64():
    """Run the test at float64 (verification precision)."""
    with ag.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
