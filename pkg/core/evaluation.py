"""Experiment runners: localization reports, confidence ablation, budget sweeps, runtime bench."""

from dataclasses import dataclass, field
import json
import logging
import math
import time
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ErrorInfo, InsufficientKeypoints, InvalidConfig, LocalizationFailed, MissingLabels, RelocError
from .geometry import CameraIntrinsics, ScenePose, pose_errors, project_points
from .keypoints import (
    CoordMap,
    Correspondence,
    KeypointParams,
    gather_correspondences,
    select_keypoints,
    split_by_confidence,
)
from .regressor import Regressor
from .scene import Heatmap, reference_heatmap
from .solver import PoseEstimate, RansacConfig, ransac_pnp, ransac_pnp_arrays
from .synthetic import (
    PlantedFrame,
    RegionClass,
    RegionLabelMap,
    SyntheticScene,
    corrupt_correspondences,
    exact_correspondences,
    ground_truth_coords,
    look_at,
)


logger = logging.getLogger(__name__)

# Average correspondences per frame on the Cambridge Landmarks scenes.
CAMBRIDGE_BUDGETS = {
    "kings_college": 600,
    "old_hospital": 250,
    "shop_facade": 130,
    "st_marys_church": 500,
}


@dataclass(frozen=True, eq=False)
class EvalFrame:
    """Everything the pose step needs for one frame, plus its ground truth."""
    image_id: int
    intrinsics: CameraIntrinsics
    gt_pose: ScenePose
    heatmap: Heatmap
    coords: CoordMap
    labels: Optional[RegionLabelMap] = None


def oracle_frames(scene: SyntheticScene, image_ids: Optional[Iterable[int]] = None) -> list[EvalFrame]:
    """Reference heatmaps of reliable points with ground-truth coordinate maps."""
    reliable = scene.reliable_model()
    frames = []
    for image_id in image_ids if image_ids is not None else scene.model.image_ids:
        frame = scene.model.frame(image_id)
        coords, _ = ground_truth_coords(scene, image_id)
        _, labels = scene.render(image_id)
        frames.append(
            EvalFrame(image_id, frame.intrinsics, frame.pose, reference_heatmap(reliable, image_id), coords, labels)
        )
    return frames


def regressor_frames(
    model: Regressor, scene: SyntheticScene, image_ids: Optional[Iterable[int]] = None
) -> list[EvalFrame]:
    """Predicted heatmaps and coordinates for rendered frames."""
    frames = []
    for image_id in image_ids if image_ids is not None else scene.model.image_ids:
        frame = scene.model.frame(image_id)
        image, labels = scene.render(image_id)
        out = model.forward(image)
        frames.append(EvalFrame(image_id, frame.intrinsics, frame.pose, out.heatmap, out.coords, labels))
    return frames


def planted_frames(planted: Sequence[PlantedFrame]) -> list[EvalFrame]:
    return [EvalFrame(p.image_id, p.intrinsics, p.pose, p.heatmap, p.coords) for p in planted]


@dataclass(frozen=True)
class Corruption:
    """Pixel noise and outlier planting applied to gathered correspondences."""
    noise_px: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0


@dataclass
class FrameResult:
    image_id: int
    correspondence_count: int = 0
    inlier_count: int = 0
    mean_inlier_error: float = math.nan
    trans_err: float = math.nan
    rot_err: float = math.nan
    pose_time_s: float = math.nan
    pose: Optional[ScenePose] = None
    error: Optional[ErrorInfo] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self, include_timing: bool = False) -> dict:
        """Wall time is included only on request."""
        data = {
            "image_id": self.image_id,
            "ok": self.ok,
            "correspondences": self.correspondence_count,
            "inliers": self.inlier_count,
            "mean_inlier_error": _json_float(self.mean_inlier_error),
            "trans_err": _json_float(self.trans_err),
            "rot_err": _json_float(self.rot_err),
            "pose": None if self.pose is None else {
                "rotation": list(self.pose.rotation),
                "translation": list(self.pose.translation),
            },
            "error": self.error.to_dict() if self.error else None,
        }
        if include_timing:
            data["pose_time_s"] = _json_float(self.pose_time_s)
        return data


def _json_float(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def lower_median(values: Iterable[float]) -> float:
    """sorted(values)[(n - 1) // 2] over finite values; NaN when there are none."""
    finite = sorted(v for v in values if math.isfinite(v))
    if not finite:
        return math.nan
    return finite[(len(finite) - 1) // 2]


@dataclass
class LocalizationReport:
    frames: list[FrameResult] = field(default_factory=list)
    label: str = ""

    @property
    def succeeded(self) -> list[FrameResult]:
        return [f for f in self.frames if f.ok]

    @property
    def failed_count(self) -> int:
        return len(self.frames) - len(self.succeeded)

    @property
    def failure_rate(self) -> float:
        return self.failed_count / len(self.frames) if self.frames else 0.0

    @property
    def median_trans(self) -> float:
        return lower_median(f.trans_err for f in self.succeeded)

    @property
    def median_rot(self) -> float:
        return lower_median(f.rot_err for f in self.succeeded)

    def summary(self) -> dict:
        return {
            "label": self.label,
            "frames": len(self.frames),
            "failed": self.failed_count,
            "failure_rate": self.failure_rate,
            "median_trans": _json_float(self.median_trans),
            "median_rot": _json_float(self.median_rot),
        }

    def to_json_lines(self, include_timing: bool = False) -> str:
        lines = [json.dumps(f.to_dict(include_timing), sort_keys=True) for f in self.frames]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"


def format_table(reports: dict[str, LocalizationReport]) -> str:
    """Median errors per report as a plain-text table."""
    rows = [("Scene", "Median error", "Failed")]
    for name, report in reports.items():
        if math.isnan(report.median_trans):
            cell = "n/a"
        else:
            cell = f"{report.median_trans:.4f}, {report.median_rot:.3f}°"
        rows.append((name, cell, f"{report.failed_count}/{len(report.frames)}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _localize(
    frame: EvalFrame,
    corrs: list[Correspondence],
    ransac: RansacConfig,
    result: FrameResult,
) -> FrameResult:
    result.correspondence_count = len(corrs)
    start = time.perf_counter()
    estimate: PoseEstimate = ransac_pnp(corrs, frame.intrinsics, ransac)
    result.pose_time_s = time.perf_counter() - start
    result.pose = estimate.pose
    result.inlier_count = estimate.inlier_count
    result.mean_inlier_error = estimate.mean_error
    result.trans_err, result.rot_err = pose_errors(estimate.pose, frame.gt_pose)
    return result


def _record_failure(result: FrameResult, e: RelocError) -> FrameResult:
    failure = LocalizationFailed(f"frame {result.image_id}: {e.__class__.__name__}: {e.message}")
    result.error = failure.to_error_info()
    logger.warning("%s", failure.message)
    return result


def evaluate_localization(
    frames: Sequence[EvalFrame],
    kp_params: Optional[KeypointParams] = None,
    ransac: Optional[RansacConfig] = None,
    corruption: Optional[Corruption] = None,
    label: str = "",
) -> LocalizationReport:
    """NMS, correspondence gathering and RANSAC per frame, compared with ground truth."""
    kp_params = kp_params or KeypointParams()
    ransac = ransac or RansacConfig()
    report = LocalizationReport(label=label)
    for frame in frames:
        result = FrameResult(frame.image_id)
        try:
            keypoints = select_keypoints(frame.heatmap, kp_params)
            if len(keypoints) < 4:
                raise InsufficientKeypoints("selected", len(keypoints), 4)
            corrs = gather_correspondences(keypoints, frame.coords)
            if corruption is not None:
                corrs, _ = corrupt_correspondences(
                    corrs,
                    corruption.noise_px,
                    corruption.outlier_fraction,
                    corruption.seed + frame.image_id,
                    frame.intrinsics.width,
                    frame.intrinsics.height,
                )
            _localize(frame, corrs, ransac, result)
        except RelocError as e:
            _record_failure(result, e)
        report.frames.append(result)
    logger.info(
        "%s: %d frames, %d failed, median errors %.6g / %.6g deg",
        label or "localization", len(report.frames), report.failed_count, report.median_trans, report.median_rot,
    )
    return report


def ablate_confidence_sets(
    frames: Sequence[EvalFrame],
    count: int = 200,
    hi: float = 0.7,
    lo: float = 0.4,
    ransac: Optional[RansacConfig] = None,
    radius: int = 4,
) -> tuple[LocalizationReport, LocalizationReport]:
    """Localize each frame twice: with its confident set and with its low-band set."""
    ransac = ransac or RansacConfig()
    report_hi = LocalizationReport(label=f"conf>={hi}")
    report_lo = LocalizationReport(label=f"conf~{lo}")
    for frame in frames:
        result_hi = FrameResult(frame.image_id)
        result_lo = FrameResult(frame.image_id)
        try:
            set_hi, set_lo = split_by_confidence(frame.heatmap, frame.coords, hi, lo, count, radius)
        except RelocError as e:
            report_hi.frames.append(_record_failure(result_hi, e))
            report_lo.frames.append(_record_failure(result_lo, e))
            continue
        for corrs, result, report in ((set_hi, result_hi, report_hi), (set_lo, result_lo, report_lo)):
            try:
                _localize(frame, corrs, ransac, result)
            except RelocError as e:
                _record_failure(result, e)
            report.frames.append(result)
    return report_hi, report_lo


def sweep_budgets(
    frames: Sequence[EvalFrame],
    budgets: Sequence[int],
    kp_params: Optional[KeypointParams] = None,
    ransac: Optional[RansacConfig] = None,
) -> dict[int, LocalizationReport]:
    """Localization with the keypoint budget capped at each value."""
    base = kp_params or KeypointParams()
    reports = {}
    for budget in budgets:
        params = KeypointParams(
            radius=base.radius,
            threshold=base.threshold,
            max_count=budget,
            min_count=base.min_count,
            fallback_thresholds=base.fallback_thresholds,
        )
        reports[budget] = evaluate_localization(frames, params, ransac, label=f"budget={budget}")
    return reports


# Robustness and runtime

@dataclass
class RobustnessReport:
    trans_errors: list[float]
    recovery: list[float]  # fraction of planted inliers flagged as inliers, per trial
    diameter: float

    @property
    def median_trans(self) -> float:
        return lower_median(self.trans_errors)

    @property
    def mean_recovery(self) -> float:
        return float(np.mean(self.recovery)) if self.recovery else math.nan

    def to_dict(self) -> dict:
        return {
            "trials": len(self.trans_errors),
            "median_trans": _json_float(self.median_trans),
            "median_trans_fraction_of_diameter": _json_float(self.median_trans / self.diameter),
            "mean_recovery": _json_float(self.mean_recovery),
        }


def robustness_trials(
    scene: SyntheticScene,
    seeds: Iterable[int],
    count: int = 200,
    noise_px: float = 1.0,
    outlier_fraction: float = 0.3,
    ransac: Optional[RansacConfig] = None,
) -> RobustnessReport:
    """RANSAC on corrupted exact correspondences, one trial per seed.

    Each trial picks a frame and `count` of its visible points, both from the seed.
    """
    ransac = ransac or RansacConfig()
    model = scene.model
    errors, recovery = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        eligible = [i for i in model.image_ids if len(model.observations(i)) >= count]
        if not eligible:
            raise InsufficientKeypoints("visible", max(len(model.observations(i)) for i in model.image_ids), count)
        image_id = eligible[int(rng.integers(len(eligible)))]
        exact = exact_correspondences(model, image_id)
        chosen = sorted(rng.choice(len(exact), count, replace=False))
        frame = model.frame(image_id)
        k = frame.intrinsics
        corrs, outliers = corrupt_correspondences(
            [exact[i] for i in chosen], noise_px, outlier_fraction, seed, k.width, k.height
        )
        estimate = ransac_pnp(corrs, k, ransac)
        errors.append(pose_errors(estimate.pose, frame.pose)[0])
        planted = ~outliers
        recovery.append(float(np.count_nonzero(estimate.inlier_mask & planted)) / max(1, int(planted.sum())))
    return RobustnessReport(errors, recovery, model.diameter)


@dataclass
class BenchRow:
    count: int
    median_time_s: float
    inlier_count: int

    def to_dict(self) -> dict:
        return {"count": self.count, "median_time_s": self.median_time_s, "inliers": self.inlier_count}


@dataclass
class BenchReport:
    rows: list[BenchRow]

    @property
    def ratio(self) -> float:
        """Median time of the largest count over that of the smallest."""
        if len(self.rows) < 2:
            return math.nan
        return self.rows[-1].median_time_s / self.rows[0].median_time_s

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "ratio": _json_float(self.ratio)}

    def format(self) -> str:
        lines = ["count  median_time_s  inliers"]
        for r in self.rows:
            lines.append(f"{r.count:5d}  {r.median_time_s:13.6f}  {r.inlier_count:7d}")
        lines.append(f"ratio {self.ratio:.2f}")
        return "\n".join(lines) + "\n"


def bench_correspondences(count: int, seed: int, noise_px: float = 1.0, outlier_fraction: float = 0.3):
    """Fixed camera and `count` in-view points with planted noise and outliers."""
    k = CameraIntrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)
    pose = look_at(np.array([0.0, -8.0, 1.0]), np.zeros(3))
    rng = np.random.default_rng(seed)
    world = np.zeros((0, 3))
    while len(world) < count:
        batch = rng.uniform(-2.0, 2.0, size=(2 * count, 3))
        pixels, depth = project_points(k, pose, batch)
        inside = (depth > 0) & (pixels[:, 0] >= 0) & (pixels[:, 0] < k.width) & (pixels[:, 1] >= 0) & (pixels[:, 1] < k.height)
        world = np.concatenate([world, batch[inside]])
    world = world[:count]
    pixels, _ = project_points(k, pose, world)
    exact = [Correspondence((float(p[0]), float(p[1])), (float(x[0]), float(x[1]), float(x[2]))) for p, x in zip(pixels, world)]
    corrs, outliers = corrupt_correspondences(exact, noise_px, outlier_fraction, seed, k.width, k.height)
    return corrs, outliers, k, pose


def bench_pose_runtime(
    counts: Sequence[int] = (200, 4800),
    trials: int = 5,
    ransac: Optional[RansacConfig] = None,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of the pose step (RANSAC plus refinement) per correspondence count."""
    if any(c < 4 for c in counts):
        raise InvalidConfig(f"Bench counts must be >= 4, got {min(counts)}")
    ransac = ransac or RansacConfig()
    rows = []
    for count in sorted(counts):
        corrs, _, k, _ = bench_correspondences(count, seed)
        pixels = np.array([c.pixel for c in corrs])
        world = np.array([c.world for c in corrs])
        times = []
        estimate = None
        for _ in range(trials):
            start = time.perf_counter()
            estimate = ransac_pnp_arrays(pixels, world, k, ransac)
            times.append(time.perf_counter() - start)
        rows.append(BenchRow(count, float(np.median(times)), estimate.inlier_count))
        logger.info("bench count=%d median %.6fs", count, rows[-1].median_time_s)
    return BenchReport(rows)


# Selectivity

@dataclass
class SelectivityReport:
    means: dict[str, float]
    pixel_counts: dict[str, int]

    def ratio(self, numerator: str, denominator: str) -> float:
        return self.means[numerator] / self.means[denominator]

    def to_dict(self) -> dict:
        return {"means": self.means, "pixel_counts": self.pixel_counts}


def selectivity_report(
    model: Regressor, frames: Sequence[tuple[np.ndarray, Optional[RegionLabelMap]]]
) -> SelectivityReport:
    """Mean predicted confidence per region class over labelled frames."""
    sums = {region: 0.0 for region in RegionClass}
    counts = {region: 0 for region in RegionClass}
    for index, (image, labels) in enumerate(frames):
        if labels is None:
            raise MissingLabels(f"Frame {index} has no region labels")
        heat = model.forward(image).heatmap.values
        for region in RegionClass:
            mask = labels.mask(region)
            sums[region] += float(heat[mask].sum())
            counts[region] += int(mask.sum())
    empty = [region.name.lower() for region in RegionClass if counts[region] == 0]
    if empty:
        raise MissingLabels(f"No pixels labelled {', '.join(empty)}")
    return SelectivityReport(
        means={region.name.lower(): sums[region] / counts[region] for region in RegionClass},
        pixel_counts={region.name.lower(): counts[region] for region in RegionClass},
    )
