import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from darkflash.pipeline import capture
from darkflash.synth import make_bumpfield_scene, make_sphere_scene

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sphere32():
    return make_sphere_scene(32)


@pytest.fixture(scope="session")
def bump32():
    return make_bumpfield_scene(32, seed=3)


@pytest.fixture(scope="session")
def sphere_capture(sphere32):
    return capture(sphere32, seed=1)


@pytest.fixture(scope="session")
def bump_capture(bump32):
    return capture(bump32, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
