"""Tests for P3P, DLT, refinement and RANSAC."""

import numpy as np
import pytest

from core.errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    InvalidConfig,
    NoValidHypothesis,
    RankDeficient,
    TooFewCorrespondences,
    TooFewInliers,
)
from core.geometry import ScenePose, pose_errors, project_points
from core.solver import (
    PoseEstimate,
    RansacConfig,
    dlt_solve,
    p3p_solve,
    ransac_pnp,
    ransac_pnp_arrays,
    refine_pose,
    refine_pose_traced,
)

from .conftest import make_correspondences, points_in_front, random_pose


def close_to(pose: ScenePose, truth: ScenePose, tol: float = 1e-6) -> bool:
    return (
        np.abs(pose.rotation_matrix - truth.rotation_matrix).max() < tol
        and np.abs(pose.translation_vector - truth.translation_vector).max() < tol * (1 + np.abs(truth.translation_vector).max())
    )


def exact_setup(rng, camera, n):
    pose = random_pose(rng)
    world = points_in_front(rng, pose, n, camera)
    pixels, _ = project_points(camera, pose, world)
    return pose, pixels, world


class TestP3P:
    """Minimal three-point solver."""

    def test_recovers_pose(self, camera, rng):
        """One of the candidates is the generating pose."""
        for _ in range(20):
            pose, pixels, world = exact_setup(rng, camera, 3)
            candidates = p3p_solve(make_correspondences(pixels, world), camera)
            assert 1 <= len(candidates) <= 4
            assert any(close_to(c, pose) for c in candidates)

    def test_candidates_reproject(self, camera, rng):
        """Every candidate maps the three points onto their pixels."""
        pose, pixels, world = exact_setup(rng, camera, 3)
        for candidate in p3p_solve(make_correspondences(pixels, world), camera):
            projected, depth = project_points(camera, candidate, world)
            assert np.all(depth > 0)
            assert np.abs(projected - pixels).max() < 1e-6

    def test_wrong_count(self, camera, rng):
        """Exactly three correspondences are required."""
        _, pixels, world = exact_setup(rng, camera, 4)
        with pytest.raises(DimensionMismatch):
            p3p_solve(make_correspondences(pixels, world), camera)

    def test_collinear(self, camera):
        """Collinear world points are degenerate."""
        world = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [2.0, 0.0, 5.0]])
        pixels, _ = project_points(camera, ScenePose.identity(), world)
        with pytest.raises(DegenerateConfiguration):
            p3p_solve(make_correspondences(pixels, world), camera)

    def test_repeated_pixel(self, camera):
        """Two correspondences on the same pixel are degenerate."""
        world = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 6.0], [0.0, 1.0, 7.0]])
        pixels = np.array([[100.0, 100.0], [100.0, 100.0], [200.0, 50.0]])
        with pytest.raises(DegenerateConfiguration):
            p3p_solve(make_correspondences(pixels, world), camera)


class TestDLT:
    """Linear solver."""

    def test_recovers_pose(self, camera, rng):
        """Noise-free input reproduces the generating pose."""
        for _ in range(10):
            pose, pixels, world = exact_setup(rng, camera, 10)
            assert close_to(dlt_solve(make_correspondences(pixels, world), camera), pose)

    def test_too_few(self, camera, rng):
        """Fewer than six correspondences are degenerate."""
        _, pixels, world = exact_setup(rng, camera, 5)
        with pytest.raises(DegenerateConfiguration):
            dlt_solve(make_correspondences(pixels, world), camera)

    def test_coplanar(self, camera, rng):
        """A planar point set leaves the system rank deficient."""
        world = np.column_stack([rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10), np.full(10, 5.0)])
        pixels, _ = project_points(camera, ScenePose.identity(), world)
        with pytest.raises(RankDeficient):
            dlt_solve(make_correspondences(pixels, world), camera)

    def test_noisy_input(self, camera, rng):
        """Pixel noise closes the singular value gap."""
        _, pixels, world = exact_setup(rng, camera, 10)
        pixels = pixels + rng.normal(scale=1.0, size=pixels.shape)
        with pytest.raises(RankDeficient):
            dlt_solve(make_correspondences(pixels, world), camera)

    def test_coincident_points(self, camera):
        """All world points equal is degenerate."""
        world = np.tile([0.0, 0.0, 5.0], (6, 1))
        pixels = np.arange(12, dtype=float).reshape(6, 2)
        with pytest.raises(DegenerateConfiguration):
            dlt_solve(make_correspondences(pixels, world), camera)


class TestRefine:
    """Gauss-Newton refinement."""

    def test_converges_from_perturbation(self, camera, rng):
        """A perturbed start converges back to the true pose."""
        pose, pixels, world = exact_setup(rng, camera, 30)
        start = ScenePose.from_matrix(
            pose.rotation_matrix @ random_pose(rng, max_angle=0.02).rotation_matrix,
            pose.translation_vector + rng.normal(scale=0.05, size=3),
        )
        refined, trace = refine_pose_traced(start, make_correspondences(pixels, world), camera, iterations=20)
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]
        assert close_to(refined, pose, 1e-6)

    def test_exact_start_unchanged(self, camera, rng):
        """An exact pose needs no step."""
        pose, pixels, world = exact_setup(rng, camera, 10)
        corrs = make_correspondences(pixels, world)
        refined = refine_pose(pose, corrs, camera)
        trans, rot = pose_errors(refined, pose)
        assert trans < 1e-9 and rot < 1e-6

    def test_zero_iterations(self, camera, rng):
        """No iterations returns the initial pose."""
        pose, pixels, world = exact_setup(rng, camera, 10)
        start = ScenePose.from_matrix(pose.rotation_matrix, pose.translation_vector + 0.1)
        assert refine_pose(start, make_correspondences(pixels, world), camera, iterations=0) is start

    def test_too_few_inliers(self, camera, rng):
        """At least four inliers are required."""
        pose, pixels, world = exact_setup(rng, camera, 3)
        with pytest.raises(TooFewInliers):
            refine_pose(pose, make_correspondences(pixels, world), camera)


class TestRansac:
    """Robust estimation."""

    @pytest.fixture
    def contaminated(self, camera, rng):
        pose, pixels, world = exact_setup(rng, camera, 100)
        pixels = pixels.copy()
        pixels[70:] = rng.uniform([0, 0], [camera.width - 1, camera.height - 1], size=(30, 2))
        return pose, pixels, world

    def test_outliers(self, camera, contaminated):
        """30% outliers still give the true pose and flag the clean set."""
        pose, pixels, world = contaminated
        estimate = ransac_pnp(make_correspondences(pixels, world), camera, RansacConfig(iterations=200))
        trans, rot = pose_errors(estimate.pose, pose)
        assert trans < 1e-6 and rot < 1e-4
        assert estimate.inlier_mask[:70].all()
        assert estimate.inlier_count == int(estimate.inlier_mask.sum()) >= 70
        assert estimate.mean_error < 3.0

    def test_deterministic(self, camera, contaminated):
        """Same seed, same estimate."""
        _, pixels, world = contaminated
        a = ransac_pnp_arrays(pixels, world, camera, RansacConfig(iterations=50, seed=7))
        b = ransac_pnp_arrays(pixels, world, camera, RansacConfig(iterations=50, seed=7))
        assert a.pose.rotation == b.pose.rotation
        assert a.pose.translation == b.pose.translation
        assert np.array_equal(a.inlier_mask, b.inlier_mask)

    def test_inliers_within_threshold(self, camera, contaminated):
        """Every flagged inlier reprojects within the threshold."""
        _, pixels, world = contaminated
        cfg = RansacConfig(iterations=100, inlier_threshold_px=2.0)
        estimate = ransac_pnp_arrays(pixels, world, camera, cfg)
        projected, _ = project_points(camera, estimate.pose, world[estimate.inlier_mask])
        assert np.linalg.norm(projected - pixels[estimate.inlier_mask], axis=1).max() <= 2.0

    def test_too_few_correspondences(self, camera, rng):
        """Fewer than four correspondences are rejected."""
        _, pixels, world = exact_setup(rng, camera, 3)
        with pytest.raises(TooFewCorrespondences):
            ransac_pnp(make_correspondences(pixels, world), camera)

    def test_all_degenerate(self, camera):
        """Only collinear samples give no hypothesis."""
        world = np.column_stack([np.linspace(-1, 1, 6), np.zeros(6), np.full(6, 5.0)])
        pixels, _ = project_points(camera, ScenePose.identity(), world)
        with pytest.raises(NoValidHypothesis):
            ransac_pnp_arrays(pixels, world, camera, RansacConfig(iterations=10))

    def test_shape_mismatch(self, camera):
        """Pixel and world arrays must pair up."""
        with pytest.raises(DimensionMismatch):
            ransac_pnp_arrays(np.zeros((5, 2)), np.zeros((6, 3)), camera, RansacConfig())

    @pytest.mark.parametrize(
        "kwargs", [{"iterations": 0}, {"inlier_threshold_px": 0.0}, {"refine_iterations": -1}]
    )
    def test_invalid_config(self, kwargs):
        """Non-positive iterations or threshold are rejected."""
        with pytest.raises(InvalidConfig):
            RansacConfig(**kwargs)


class TestPoseEstimate:
    """Output formatting."""

    def test_to_line(self):
        """Pose line followed by inlier ratio and mean error."""
        estimate = PoseEstimate(ScenePose.identity(), np.array([True, True, False]), 2, 0.25)
        line = estimate.to_line(7)
        assert line.startswith("7 ")
        assert line.endswith("inliers=2/3 mean_err=0.250000")

    def test_to_dict(self):
        """Dictionary form carries the mask as booleans."""
        d = PoseEstimate(ScenePose.identity(), np.array([True, False]), 1, 0.5).to_dict()
        assert d["rotation"] == [1.0, 0.0, 0.0, 0.0]
        assert d["inlier_mask"] == [True, False]
