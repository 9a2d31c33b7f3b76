import math

import numpy as np
import pytest
from hypothesis import settings

from racenmpc.dynamics import VehicleParams
from racenmpc.track import build_track

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def params():
    return VehicleParams.default()


@pytest.fixture(scope="session")
def stadium():
    return build_track({"kind": "stadium"})


@pytest.fixture(scope="session")
def circle_track():
    # 100 samples on a circle of radius 5
    return build_track({"kind": "circle", "circumference": 2 * math.pi * 5, "d_s": 2 * math.pi * 5 / 100})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
