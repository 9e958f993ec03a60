import numpy as np
import pytest

from fuselidar.geometry import Intrinsics


@pytest.fixture
def intr_plain():
    """Distortion-free 640x480 camera, f = 600, principal point at center."""
    return Intrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                      dist=(0.0, 0.0, 0.0, 0.0, 0.0), width=640, height=480)


@pytest.fixture
def intr_distorted():
    """Camera with mild radial-tangential distortion."""
    return Intrinsics(fx=600.0, fy=595.0, cx=322.5, cy=238.0,
                      dist=(-0.05, 0.01, 0.001, -0.0005, 0.002),
                      width=640, height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
