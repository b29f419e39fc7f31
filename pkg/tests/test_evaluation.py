"""Tests for the experiment runners and their reports."""

import json
import math

import numpy as np
import pytest

from core.errors import InsufficientKeypoints, InvalidConfig, MissingLabels
from core.geometry import ScenePose
from core.keypoints import CoordMap, KeypointParams, select_keypoints
from core.regressor import Regressor, RegressorConfig
from core.scene import Heatmap, reference_heatmap
from core.synthetic import RegionLabelMap, planted_confidence_frames
from core.evaluation import (
    CAMBRIDGE_BUDGETS,
    BenchReport,
    BenchRow,
    Corruption,
    EvalFrame,
    FrameResult,
    LocalizationReport,
    ablate_confidence_sets,
    bench_correspondences,
    bench_pose_runtime,
    evaluate_localization,
    format_table,
    lower_median,
    oracle_frames,
    planted_frames,
    robustness_trials,
    selectivity_report,
    sweep_budgets,
)


@pytest.fixture(scope="module")
def oracle(scene):
    return oracle_frames(scene, [0, 5, 10])


def blank_frame(scene, image_id=0):
    frame = scene.model.frame(image_id)
    return EvalFrame(image_id, frame.intrinsics, frame.pose, Heatmap.zeros(64, 64), CoordMap(np.zeros((64, 64, 3))))


class TestLowerMedian:
    """Order-statistic median."""

    def test_even(self):
        """Even counts take the lower middle value."""
        assert lower_median([3.0, 1.0, 2.0, 4.0]) == 2.0

    def test_odd(self):
        """Odd counts take the middle value."""
        assert lower_median([5.0, 1.0, 3.0]) == 3.0

    def test_ignores_non_finite(self):
        """NaN and infinity are skipped."""
        assert lower_median([math.nan, 1.0, math.inf, 2.0]) == 1.0

    def test_empty(self):
        """No values gives NaN."""
        assert math.isnan(lower_median([]))


class TestEvaluateLocalization:
    """Per-frame localization against ground truth."""

    def test_oracle_is_exact(self, oracle):
        """Ground-truth heatmaps and coordinates recover every pose."""
        report = evaluate_localization(oracle)
        assert report.failed_count == 0
        assert report.median_trans < 1e-6
        assert report.median_rot < 1e-4
        for result in report.frames:
            assert result.inlier_count == result.correspondence_count

    def test_default_frames_keep_keypoints(self, scene):
        """Every default frame keeps at least four spread keypoints after NMS."""
        reliable = scene.reliable_model()
        for image_id in scene.model.image_ids:
            kps = select_keypoints(reference_heatmap(reliable, image_id), KeypointParams())
            assert len(kps) >= 4, image_id
            pixels = np.array([kp.pixel for kp in kps])
            spread = np.linalg.svd(pixels - pixels.mean(axis=0), compute_uv=False)
            assert spread[1] > 1.0, image_id

    def test_failure_recorded(self, scene, oracle):
        """A frame without keypoints fails without stopping the run."""
        report = evaluate_localization([blank_frame(scene), *oracle])
        assert report.failed_count == 1
        failed = report.frames[0]
        assert not failed.ok
        assert failed.error.type == "LocalizationFailed"
        assert "InsufficientKeypoints" in failed.error.message
        assert math.isnan(failed.trans_err)
        assert report.failure_rate == pytest.approx(0.25)

    def test_corruption_none_matches_clean(self, oracle):
        """Zero noise and no outliers change nothing."""
        clean = evaluate_localization(oracle)
        corrupted = evaluate_localization(oracle, corruption=Corruption())
        assert [f.trans_err for f in clean.frames] == [f.trans_err for f in corrupted.frames]

    def test_noise_degrades(self, oracle):
        """Pixel noise raises the median error above the exact case."""
        noisy = evaluate_localization(oracle, corruption=Corruption(noise_px=1.0, seed=3))
        assert noisy.median_trans > 1e-6

    def test_json_lines(self, oracle):
        """One line per frame plus a summary; timing only on request."""
        report = evaluate_localization(oracle, label="oracle")
        lines = report.to_json_lines().splitlines()
        assert len(lines) == 4
        first = json.loads(lines[0])
        assert "pose_time_s" not in first
        assert first["ok"] is True
        assert json.loads(lines[-1])["summary"]["label"] == "oracle"
        timed = json.loads(report.to_json_lines(include_timing=True).splitlines()[0])
        assert timed["pose_time_s"] >= 0

    def test_json_is_deterministic(self, oracle):
        """Without timing, repeated runs serialise identically."""
        assert evaluate_localization(oracle).to_json_lines() == evaluate_localization(oracle).to_json_lines()

    def test_failed_frame_serialises_nulls(self, scene):
        """Missing errors become null."""
        report = evaluate_localization([blank_frame(scene)])
        data = json.loads(report.to_json_lines().splitlines()[0])
        assert data["trans_err"] is None and data["pose"] is None
        assert data["error"]["exit_code"] == 4


class TestFormatTable:
    """Plain-text result table."""

    def test_columns(self):
        """Header, rule and one row per report."""
        ok = LocalizationReport([FrameResult(0, trans_err=0.5, rot_err=1.25, pose=ScenePose.identity())])
        empty = LocalizationReport([])
        lines = format_table({"shop_facade": ok, "none": empty}).splitlines()
        assert lines[0].split() == ["Scene", "Median", "error", "Failed"]
        assert set(lines[1]) <= {"-", " "}
        assert "0.5000, 1.250°" in lines[2]
        assert lines[2].endswith("0/1")
        assert "n/a" in lines[3]


class TestAblation:
    """Confident versus low-band correspondence sets."""

    def test_confident_set_wins(self):
        """The confident set gives at least half the median error of the low band."""
        frames = planted_frames(planted_confidence_frames(n_frames=10, seed=0))
        hi, lo = ablate_confidence_sets(frames, count=200, hi=0.7, lo=0.4)
        assert hi.failed_count == 0
        assert lo.median_trans >= 2 * hi.median_trans

    def test_split_failure_marks_both(self, scene):
        """A frame without peaks fails in both reports."""
        hi, lo = ablate_confidence_sets([blank_frame(scene)], count=10)
        assert hi.failed_count == lo.failed_count == 1


class TestSweepBudgets:
    """Keypoint budget sweep."""

    def test_budgets_cap_correspondences(self, oracle):
        """Each report is keyed by its budget and respects it."""
        reports = sweep_budgets(oracle, [8, 20], KeypointParams(radius=1, threshold=0.5))
        assert list(reports) == [8, 20]
        for budget, report in reports.items():
            assert all(f.correspondence_count <= budget for f in report.frames)
            assert report.label == f"budget={budget}"

    def test_cambridge_budgets(self):
        """Four reference scenes with their average correspondence counts."""
        assert CAMBRIDGE_BUDGETS["shop_facade"] == 130
        assert len(CAMBRIDGE_BUDGETS) == 4


class TestRobustness:
    """Noise and outlier trials on exact correspondences."""

    def test_recovers_inliers(self, scene):
        """Most planted inliers are flagged and errors stay small."""
        report = robustness_trials(scene, range(5), count=50)
        assert len(report.trans_errors) == 5
        assert report.mean_recovery > 0.75
        assert report.median_trans < 0.1 * report.diameter
        assert set(report.to_dict()) == {"trials", "median_trans", "median_trans_fraction_of_diameter", "mean_recovery"}

    def test_count_too_large(self, scene):
        """No frame sees enough points."""
        with pytest.raises(InsufficientKeypoints):
            robustness_trials(scene, [0], count=10000)


class TestBench:
    """Pose-step runtime bench."""

    def test_correspondences(self):
        """Requested count with 30% planted outliers."""
        corrs, outliers, k, _ = bench_correspondences(60, seed=1)
        assert len(corrs) == 60
        assert outliers.sum() == 18
        assert (k.width, k.height) == (640, 480)

    def test_report(self):
        """Rows follow ascending counts and the ratio compares the extremes."""
        report = bench_pose_runtime(counts=(100, 50), trials=1)
        assert [row.count for row in report.rows] == [50, 100]
        assert report.ratio == pytest.approx(report.rows[1].median_time_s / report.rows[0].median_time_s)
        assert "ratio" in report.format()

    def test_too_small(self):
        """Counts below four are rejected."""
        with pytest.raises(InvalidConfig):
            bench_pose_runtime(counts=(3,), trials=1)

    def test_single_row_ratio(self):
        """One row has no ratio."""
        report = BenchReport([BenchRow(10, 0.1, 8)])
        assert math.isnan(report.ratio)
        assert report.to_dict()["ratio"] is None


class TestSelectivity:
    """Mean confidence per region class."""

    def test_zero_heads_uniform(self, scene):
        """Zero-initialised heads give 0.5 everywhere."""
        model = Regressor(RegressorConfig())
        report = selectivity_report(model, [scene.render(i) for i in (0, 1)])
        assert report.means == {"background": 0.5, "discriminative": 0.5, "repetitive": 0.5}
        assert report.ratio("discriminative", "repetitive") == 1.0
        assert sum(report.pixel_counts.values()) == 2 * 64 * 64

    def test_missing_labels(self, scene):
        """Frames must carry labels."""
        image, _ = scene.render(0)
        with pytest.raises(MissingLabels):
            selectivity_report(Regressor(RegressorConfig()), [(image, None)])

    def test_missing_region(self, scene):
        """Every region class needs at least one pixel."""
        image, _ = scene.render(0)
        labels = RegionLabelMap(np.zeros((64, 64), dtype=np.uint8))
        with pytest.raises(MissingLabels):
            selectivity_report(Regressor(RegressorConfig()), [(image, labels)])
