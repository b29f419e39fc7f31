"""Tests for camera geometry."""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.errors import BehindCamera, InvalidConfig, ParseError
from core.geometry import (
    CameraIntrinsics,
    ScenePose,
    backproject,
    compose_inplane_rotation,
    format_pose_line,
    parse_pose_line,
    pose_errors,
    project,
    project_points,
    quaternions_equal,
    recenter_intrinsics,
    scale_intrinsics,
)

from .conftest import random_pose


class TestScenePose:
    """Pose construction and conventions."""

    def test_identity(self):
        """Identity pose has unit rotation and zero centre."""
        pose = ScenePose.identity()
        assert np.array_equal(pose.rotation_matrix, np.eye(3))
        assert np.array_equal(pose.center, np.zeros(3))

    def test_non_unit_quaternion_rejected(self):
        """Direct construction checks the quaternion norm."""
        with pytest.raises(InvalidConfig):
            ScenePose((1.0, 0.1, 0.0, 0.0), (0.0, 0.0, 0.0))

    def test_zero_quaternion_rejected(self):
        """from_quaternion refuses a zero quaternion."""
        with pytest.raises(InvalidConfig):
            ScenePose.from_quaternion((0, 0, 0, 0), (0, 0, 0))

    def test_from_matrix_canonical_sign(self, rng):
        """Stored quaternion has w >= 0 and reproduces the matrix."""
        for _ in range(20):
            pose = random_pose(rng)
            assert pose.rotation[0] >= 0
            again = ScenePose.from_matrix(pose.rotation_matrix, pose.translation)
            assert np.allclose(again.rotation_matrix, pose.rotation_matrix, atol=1e-12)

    def test_rotation_is_orthonormal(self, rng):
        """Rotation matrix is orthonormal with determinant +1."""
        R = random_pose(rng).rotation_matrix
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    def test_center(self):
        """C = -R^T t."""
        R = Rotation.from_euler("z", 90, degrees=True).as_matrix()
        pose = ScenePose.from_matrix(R, [1.0, 2.0, 3.0])
        assert np.allclose(pose.center, -R.T @ np.array([1.0, 2.0, 3.0]))


class TestProject:
    """Pinhole projection."""

    def test_principal_point(self, small_camera):
        """Optical-axis point hits the principal point."""
        assert np.allclose(project(small_camera, ScenePose.identity(), [0, 0, 5]), [50, 50])

    def test_offset_point(self, small_camera):
        """u = 100 * 1 / 5 + 50."""
        assert np.allclose(project(small_camera, ScenePose.identity(), [1, 0, 5]), [70, 50])

    def test_behind_camera(self, small_camera):
        """Non-positive depth raises BehindCamera with the offending index."""
        with pytest.raises(BehindCamera) as exc:
            project(small_camera, ScenePose.identity(), [[0, 0, 1], [0, 0, -1]])
        assert exc.value.index == 1

    def test_zero_depth(self, small_camera):
        """Depth exactly zero is behind."""
        with pytest.raises(BehindCamera):
            project(small_camera, ScenePose.identity(), [1, 1, 0])

    def test_matches_homogeneous_oracle(self, camera, rng):
        """Agrees with K [R | t] X followed by division."""
        for _ in range(50):
            pose = random_pose(rng)
            cam = np.array([rng.normal(), rng.normal(), rng.uniform(1.0, 10.0)])
            X = pose.center + pose.rotation_matrix.T @ cam
            P = camera.matrix @ np.hstack([pose.rotation_matrix, pose.translation_vector[:, None]])
            h = P @ np.append(X, 1.0)
            assert np.allclose(project(camera, pose, X), h[:2] / h[2], atol=1e-10)

    def test_project_points_marks_behind(self, small_camera):
        """Vectorised projection returns inf pixels instead of raising."""
        pixels, depths = project_points(small_camera, ScenePose.identity(), [[0, 0, 5], [0, 0, -5]])
        assert np.allclose(pixels[0], [50, 50])
        assert np.all(np.isinf(pixels[1]))
        assert depths[1] == -5

    def test_backproject_roundtrip(self, camera, rng):
        """project(backproject(p, d)) reproduces p."""
        pose = random_pose(rng)
        pixels = rng.uniform(0, 400, size=(30, 2))
        depths = rng.uniform(0.5, 50, size=30)
        world = backproject(camera, pose, pixels, depths)
        assert np.allclose(project(camera, pose, world), pixels, atol=1e-9)


class TestPoseErrors:
    """Translation and rotation errors."""

    def test_identical(self, rng):
        """Equal poses give zero errors."""
        pose = random_pose(rng)
        trans, rot = pose_errors(pose, pose)
        assert trans == 0.0
        assert rot == pytest.approx(0.0, abs=1e-9)

    def test_ten_degrees_same_center(self, rng):
        """Rotating about the centre by 10 degrees gives (0, 10)."""
        gt = random_pose(rng)
        axis = rng.normal(size=3)
        delta = Rotation.from_rotvec(np.radians(10) * axis / np.linalg.norm(axis)).as_matrix()
        R = delta @ gt.rotation_matrix
        est = ScenePose.from_matrix(R, -R @ gt.center)
        trans, rot = pose_errors(est, gt)
        assert trans == pytest.approx(0.0, abs=1e-9)
        assert rot == pytest.approx(10.0, abs=1e-9)

    def test_geodesic_oracle(self, rng):
        """Rotation error equals 2 acos(|q1 . q2|)."""
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            dot = abs(float(np.dot(a.rotation, b.rotation)))
            expected = math.degrees(2 * math.acos(min(1.0, dot)))
            assert pose_errors(a, b)[1] == pytest.approx(expected, abs=1e-6)

    def test_symmetric_rotation(self, rng):
        """rot_err(a, b) == rot_err(b, a)."""
        a, b = random_pose(rng), random_pose(rng)
        assert pose_errors(a, b)[1] == pytest.approx(pose_errors(b, a)[1], abs=1e-12)

    def test_translation_is_center_distance(self):
        """Translation error compares camera centres, not t vectors."""
        R = Rotation.from_euler("y", 90, degrees=True).as_matrix()
        a = ScenePose.from_matrix(R, [1, 0, 0])
        b = ScenePose.from_matrix(np.eye(3), [1, 0, 0])
        assert pose_errors(a, b)[0] == pytest.approx(np.linalg.norm(a.center - b.center))


class TestInplaneRotation:
    """Rotation about the optical axis."""

    def test_zero(self, rng):
        """theta = 0 returns the pose."""
        pose = random_pose(rng)
        assert compose_inplane_rotation(pose, 0) is pose

    def test_full_turn(self, rng):
        """theta = 360 leaves the pose unchanged."""
        pose = random_pose(rng)
        turned = compose_inplane_rotation(pose, 360)
        assert quaternions_equal(turned, pose, 1e-9)
        assert np.allclose(turned.translation, pose.translation, atol=1e-9)

    def test_pixels_rotate_about_principal_point(self, camera, rng):
        """Projections rotate by theta about (cx, cy)."""
        pose = random_pose(rng)
        X = pose.center + 5 * pose.rotation_matrix[2] + rng.normal(size=3) * 0.5
        before = project(camera, pose, X)
        after = project(camera, compose_inplane_rotation(pose, 30), X)
        a = math.radians(30)
        c, s = math.cos(a), math.sin(a)
        d = before - [camera.cx, camera.cy]
        expected = np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]]) + [camera.cx, camera.cy]
        assert np.allclose(after, expected, atol=1e-6)

    def test_composition(self, rng):
        """Two rotations compose additively."""
        pose = random_pose(rng)
        twice = compose_inplane_rotation(compose_inplane_rotation(pose, 25), -70)
        once = compose_inplane_rotation(pose, -45)
        assert quaternions_equal(twice, once, 1e-9)


class TestIntrinsics:
    """Intrinsics validation and scaling."""

    def test_invalid_focal(self):
        """Non-positive focal length is rejected."""
        with pytest.raises(InvalidConfig):
            CameraIntrinsics(0.0, 1.0, 0.5, 0.5, 2, 2)

    def test_principal_point_outside(self):
        """Principal point must lie inside the image."""
        with pytest.raises(InvalidConfig):
            CameraIntrinsics(1.0, 1.0, 5.0, 0.5, 2, 2)

    def test_scale_identity(self, small_camera):
        """s = 1 keeps everything."""
        assert scale_intrinsics(small_camera, 1.0) == small_camera

    def test_scale_two(self, small_camera):
        """s = 2 doubles focal, principal point and size."""
        assert scale_intrinsics(small_camera, 2.0) == CameraIntrinsics(200, 200, 100, 100, 200, 200)

    def test_scale_nonpositive(self, small_camera):
        """Scale must be positive."""
        with pytest.raises(InvalidConfig):
            scale_intrinsics(small_camera, 0.0)

    def test_projection_equivariance(self, small_camera, rng):
        """Projecting through scaled intrinsics scales pixels by s."""
        pose = ScenePose.identity()
        X = np.array([0.3, -0.2, 4.0])
        s = 1.37
        assert np.allclose(project(scale_intrinsics(small_camera, s), pose, X), s * project(small_camera, pose, X))

    def test_recenter_keeps_canvas(self, small_camera):
        """Recentred intrinsics keep size and principal point, take the new focal."""
        k = recenter_intrinsics(scale_intrinsics(small_camera, 1.5), small_camera)
        assert (k.width, k.height, k.cx, k.cy) == (100, 100, 50, 50)
        assert k.fx == pytest.approx(150)


class TestPoseLines:
    """Pose text lines."""

    def test_roundtrip(self, rng):
        """format_pose_line and parse_pose_line are inverse."""
        pose = random_pose(rng)
        image_id, parsed = parse_pose_line(format_pose_line(7, pose))
        assert image_id == 7
        assert parsed.rotation == pose.rotation
        assert parsed.translation == pose.translation

    def test_too_few_fields(self):
        """Short lines are a parse error with the line number."""
        with pytest.raises(ParseError) as exc:
            parse_pose_line("1 1 0 0", line_no=4)
        assert exc.value.source_line_no == 4

    def test_non_numeric(self):
        """Non-numeric fields are a parse error."""
        with pytest.raises(ParseError):
            parse_pose_line("1 a 0 0 0 0 0 0")
