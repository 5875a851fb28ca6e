import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from htsplat import core_math as cm
from htsplat import scenes

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam64():
    return scenes.default_camera(64, 64)


@pytest.fixture
def small_scene():
    return scenes.random_scene(12, 3, spread=0.7, scale_range=(0.1, 0.4))


def unit_baked(mean=(0.0, 0.0, 0.0), scales=(1.0, 1.0, 1.0), opacity=0.8, frame=None):
    return cm.BakedSplat(np.array(mean, float), np.eye(3) if frame is None else np.asarray(frame, float),
                         np.array(scales, float), np.array(opacity, float), np.zeros((16, 3)))
