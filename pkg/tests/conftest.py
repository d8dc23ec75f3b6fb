import pathlib

import numpy as np
import pytest

from needlegrasp import config
from needlegrasp.camera import CameraIntrinsics, StereoRig
from needlegrasp.geometry import RigidTransform
from needlegrasp.kinematics import JointLimits, KinematicChain

CONFIGS = pathlib.Path(__file__).parent.parent / "configs"

STATIC_NEEDLE = {
    "needle": {
        "motion": {
            "kind": "static",
            "keyframes": [[0.0, 15.0, 10.0, 10.0, 0.0, 0.0, 0.0]],
        }
    }
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scenario():
    return config.ScenarioConfig.from_dict({})


@pytest.fixture
def static_scenario():
    return config.ScenarioConfig.from_dict(STATIC_NEEDLE)


@pytest.fixture
def rig(scenario):
    return scenario.rig


@pytest.fixture
def chain(scenario):
    return scenario.chain


@pytest.fixture
def wide_chain():
    """A chain whose limits admit theta2 = 90 deg and negative insertion."""

    return KinematicChain(
        RigidTransform.identity(),
        limits=JointLimits(
            lower=[-3.2, -3.2, -300.0, -3.2, -1.5, -1.5, 0.0],
            upper=[3.2, 3.2, 300.0, 3.2, 1.5, 1.5, 1.1],
        ),
    )


@pytest.fixture
def square_camera():
    return CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0, 1000, 1000)


@pytest.fixture
def identity_rig(square_camera):
    """Left camera at the workspace origin looking along +z."""

    return StereoRig.parallel(square_camera, 5.0, RigidTransform.identity())


def random_transform(rng) -> RigidTransform:
    q = rng.normal(size=4)
    return RigidTransform.from_quaternion(q / np.linalg.norm(q), rng.uniform(-100.0, 100.0, 3))
