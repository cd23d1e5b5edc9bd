import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from refaudit.masks import head_mask
from refaudit.phantom import PhantomParams, generate_phantom

settings.register_profile(
    "ci",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


SMALL_PARAMS = PhantomParams(
    head_radii=(60.0, 62.0, 60.0),
    nose_length=14.0,
    dims=(64, 64, 64),
    spacing=(3.0, 3.0, 3.0),
)


@pytest.fixture(scope="session")
def phantom_default():
    """Full-size default phantom: (volume, brain mask, geometry)."""
    return generate_phantom(0)


@pytest.fixture(scope="session")
def phantom_head(phantom_default):
    vol, _, _ = phantom_default
    return head_mask(vol)


@pytest.fixture(scope="session")
def small_phantom():
    """64^3 at 3 mm: cheap enough for per-test pipelines."""
    return generate_phantom(1, SMALL_PARAMS)


@pytest.fixture(scope="session")
def small_head(small_phantom):
    vol, _, _ = small_phantom
    return head_mask(vol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
