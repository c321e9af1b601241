import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def small_system():
    from polyct.projector import build_system_matrix, covering_geometry

    return build_system_matrix(covering_geometry(16, 12))


@pytest.fixture(scope="session")
def grid30():
    from polyct.spectrum import build_knots

    return build_knots(1e3, 1.0, 30)
