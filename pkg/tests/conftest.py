"""Shared fixtures: cameras, random poses and a default synthetic scene."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.geometry import CameraIntrinsics, ScenePose
from core.keypoints import Correspondence
from core.synthetic import SynthSceneSpec, generate_scene


def random_pose(rng: np.random.Generator, max_angle: float = np.pi) -> ScenePose:
    rotvec = rng.normal(size=3)
    rotvec *= rng.uniform(0, max_angle) / np.linalg.norm(rotvec)
    return ScenePose.from_matrix(Rotation.from_rotvec(rotvec).as_matrix(), rng.normal(size=3))


def points_in_front(rng: np.random.Generator, pose: ScenePose, n: int, k: CameraIntrinsics) -> np.ndarray:
    """World points whose projections fall inside the image at depth 4..10."""
    depth = rng.uniform(4.0, 10.0, size=n)
    u = rng.uniform(0, k.width - 1, size=n)
    v = rng.uniform(0, k.height - 1, size=n)
    cam = np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=1)
    return (cam - pose.translation_vector) @ pose.rotation_matrix


def make_correspondences(pixels: np.ndarray, world: np.ndarray) -> list[Correspondence]:
    return [
        Correspondence((float(p[0]), float(p[1])), (float(x[0]), float(x[1]), float(x[2])))
        for p, x in zip(pixels, world)
    ]


@pytest.fixture
def camera():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=319.5, cy=239.5, width=640, height=480)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    """Default 300-point, 20-frame, 64x64 synthetic scene."""
    return generate_scene(SynthSceneSpec())


@pytest.fixture(scope="session")
def tiny_scene():
    return generate_scene(
        SynthSceneSpec(n_discriminative=40, n_repetitive=16, n_cameras=4, width=32, height=32, focal=28.0)
    )
