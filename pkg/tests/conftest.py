import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from r3r.dynamics import DubinsParams
from r3r.geometry import R3RParams

settings.register_profile("r3r", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("r3r")


@pytest.fixture
def dyn():
    return DubinsParams(1.0, 1.0)


@pytest.fixture
def params():
    return R3RParams.from_comm(16.0, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
