import numpy as np
import pytest

from poselab.geometry import Pose, RelativePose, quat_normalize


def random_pose(rng) -> Pose:
    return Pose(rng.uniform(-5, 5, size=3), quat_normalize(rng.uniform(-1, 1, size=4)))


def random_relative(rng) -> RelativePose:
    return RelativePose(rng.uniform(-1, 1, size=3),
                        quat_normalize(rng.uniform(-1, 1, size=4)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
