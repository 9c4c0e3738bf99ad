import numpy as np
import pytest

from genesis3d.volume import IntensityDomain, Volume


@pytest.fixture
def unit_volume():
    """Mid-gray volume with enough texture to pass the informativeness filter."""
    rng = np.random.default_rng(42)
    data = rng.uniform(0.2, 0.8, size=(24, 20, 12)).astype(np.float32)
    return Volume(data, (1.0, 1.0, 2.0), IntensityDomain.UNIT, "fixture-unit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
