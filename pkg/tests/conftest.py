import numpy as np
import pytest

from stegograph import tensor


@pytest.fixture
def wide():
    """Run a test under float64 ('wide') precision, restoring f32 afterwards."""
    tensor.set_precision("wide")
    yield
    tensor.set_precision("standard")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
