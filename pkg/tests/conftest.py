import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lvnas.tensor import tune_allocator

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
