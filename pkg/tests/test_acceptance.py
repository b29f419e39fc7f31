"""End-to-end properties of the full pipeline on synthetic scenes.

Wall-clock and full-training checks are marked slow; run them with
`pytest -m slow`.
"""

import numpy as np
import pytest

from core.cli import main
from core.evaluation import bench_pose_runtime, evaluate_localization, oracle_frames, robustness_trials, selectivity_report
from core.geometry import ScenePose, pose_errors, project_points
from core.gradcheck import run_gradient_suite
from core.regressor import Regressor, RegressorConfig
from core.solver import dlt_solve, p3p_solve, refine_pose_traced
from core.synthetic import SynthSceneSpec, generate_scene
from core.training import TrainConfig, samples_from_scene, train_staged

from .conftest import make_correspondences, points_in_front, random_pose


class TestOracleLocalization:
    """Ground-truth coordinates through the whole pose step."""

    def test_zero_noise_identity(self, scene):
        """Every frame of the default scene is recovered exactly."""
        report = evaluate_localization(oracle_frames(scene))
        assert len(report.frames) == 20
        assert report.failed_count == 0
        assert report.median_trans < 1e-6
        assert report.median_rot < 1e-6


class TestRobustness:
    """Noise and planted outliers at the default RANSAC settings."""

    def test_fifty_seeds(self):
        """Median centre error under 1% of the diameter, 95% inlier recovery."""
        scene = generate_scene(SynthSceneSpec(width=640, height=480, focal=500.0))
        report = robustness_trials(scene, range(50), count=200, noise_px=1.0, outlier_fraction=0.3)
        assert report.median_trans < 0.01 * report.diameter
        assert report.mean_recovery >= 0.95


class TestSolverCrossValidation:
    """Minimal and linear solvers against generating poses."""

    def test_thousand_instances(self, camera):
        """P3P and DLT both reproduce noiseless generating poses."""
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            pose = random_pose(rng)
            world = points_in_front(rng, pose, 8, camera)
            pixels, _ = project_points(camera, pose, world)
            corrs = make_correspondences(pixels, world)
            candidates = p3p_solve(corrs[:3], camera)
            assert min(pose_errors(c, pose)[0] for c in candidates) < 1e-6
            assert pose_errors(dlt_solve(corrs, camera), pose)[0] < 1e-6

    def test_refine_monotone(self, camera):
        """The refinement objective never increases over perturbed starts."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            pose = random_pose(rng)
            world = points_in_front(rng, pose, 30, camera)
            pixels, _ = project_points(camera, pose, world)
            pixels = pixels + rng.normal(scale=0.5, size=pixels.shape)
            start = ScenePose.from_matrix(
                pose.rotation_matrix @ random_pose(rng, max_angle=0.05).rotation_matrix,
                pose.translation_vector + rng.normal(scale=0.1, size=3),
            )
            _, trace = refine_pose_traced(start, make_correspondences(pixels, world), camera)
            assert all(b <= a for a, b in zip(trace, trace[1:]))


class TestDeterminism:
    """Repeated CLI runs with one seed produce identical files."""

    def test_eval_report(self, tmp_path):
        """Scene generation and evaluation are byte-stable."""
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["synth-gen", "--out", str(out), "--cameras", "4", "--seed", "3"]) == 0
            assert main([
                "eval", "--scene", str(out / "scene.scene1"), "--noise-px", "0.5",
                "--outlier-fraction", "0.2", "--seed", "3", "--out", str(out),
            ]) == 0
        assert (tmp_path / "a" / "report.jsonl").read_bytes() == (tmp_path / "b" / "report.jsonl").read_bytes()


@pytest.mark.slow
class TestSlow:
    """Long-running acceptance checks."""

    def test_gradient_suite(self):
        """All analytic gradients match central differences on twenty seeds."""
        results = run_gradient_suite(range(20))
        assert all(r.passed for r in results), [r.to_dict() for r in results if not r.passed]

    def test_runtime_scaling(self):
        """4800 correspondences take more than five times as long as 200."""
        report = bench_pose_runtime(counts=(200, 4800), trials=5)
        assert report.ratio > 5

    def test_selectivity_after_training(self, scene):
        """Training makes discriminative regions stand out in the heatmap."""
        model = Regressor(RegressorConfig(seed=0))
        dataset = samples_from_scene(scene)
        result = train_staged(model, dataset, TrainConfig())

        stage1 = [row.l3d for row in result.log if row.stage == 1]
        assert np.mean(stage1[-20:]) < 0.2 * np.mean(stage1[:20])
        assert all(np.isfinite(row.all) for row in result.log if row.stage == 2)

        report = selectivity_report(model, [scene.render(i) for i in scene.model.image_ids])
        assert report.ratio("discriminative", "repetitive") >= 1.5
        assert report.ratio("discriminative", "background") >= 1.5
