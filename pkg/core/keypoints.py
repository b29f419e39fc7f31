"""Keypoint selection from heatmaps and 2D-3D correspondence gathering."""

import csv
from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import InsufficientKeypoints, InvalidConfig, OutOfBounds, ValidationError
from .scene import Heatmap


logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 4
DEFAULT_THRESHOLD = 0.7
DEFAULT_MAX_COUNT = 600
LOW_BAND = 0.05
# Float slack on the low band edges
BAND_EPS = 1e-9


@dataclass(frozen=True)
class Keypoint:
    """Integer heatmap cell (u = column, v = row) with its confidence."""
    u: int
    v: int
    confidence: float

    @property
    def pixel(self) -> np.ndarray:
        return np.array([float(self.u), float(self.v)])


@dataclass(frozen=True)
class Correspondence:
    """2D pixel paired with a (predicted) 3D world point."""
    pixel: tuple[float, float]
    world: tuple[float, float, float]
    confidence: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (*self.pixel, *self.world)):
            raise ValidationError(f"Correspondence has non-finite fields: {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"Confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class CoordMap:
    """H x W x 3 grid of world coordinates."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise ValidationError(f"CoordMap must be (H, W, 3), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("CoordMap values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class KeypointParams:
    """NMS radius, confidence threshold and budget for keypoint selection.

    When fewer than min_count keypoints pass the threshold, each of the
    fallback_thresholds is tried in order.
    """
    radius: int = DEFAULT_RADIUS
    threshold: float = DEFAULT_THRESHOLD
    max_count: int = DEFAULT_MAX_COUNT
    min_count: int = 4
    fallback_thresholds: tuple[float, ...] = ()

    def __post_init__(self):
        _check_nms_args(self.radius, self.threshold, self.max_count)
        for t in self.fallback_thresholds:
            if not 0.0 <= t <= 1.0:
                raise InvalidConfig(f"Fallback threshold {t} outside [0, 1]")


def _check_nms_args(radius: int, threshold: float, max_count: int) -> None:
    if radius < 1:
        raise InvalidConfig(f"NMS radius must be >= 1, got {radius}")
    if not 0.0 <= threshold <= 1.0:
        raise InvalidConfig(f"Threshold {threshold} outside [0, 1]")
    if max_count < 1:
        raise InvalidConfig(f"max_count must be >= 1, got {max_count}")


def _local_maxima(values: np.ndarray, radius: int) -> np.ndarray:
    """Flat indices of strict window maxima, sorted by (confidence desc, row, col).

    Cells are ranked by that order; a cell survives when it holds the best
    rank of its (2r+1) x (2r+1) window, which resolves ties toward the
    smaller row and then the smaller column.
    """
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)
    rank = rank.reshape(values.shape)
    window_best = ndimage.minimum_filter(
        rank, size=2 * radius + 1, mode="constant", cval=flat.size
    )
    keep = (rank == window_best).ravel()
    return order[keep[order]]


def nms_select(h: Heatmap, radius: int, threshold: float, max_count: int) -> list[Keypoint]:
    """Window maxima with confidence >= threshold, best first, at most max_count."""
    _check_nms_args(radius, threshold, max_count)
    values = h.values
    selected = []
    for idx in _local_maxima(values, radius):
        confidence = float(values.flat[idx])
        if confidence < threshold:
            break
        row, col = divmod(int(idx), h.width)
        selected.append(Keypoint(u=col, v=row, confidence=confidence))
        if len(selected) == max_count:
            break
    return selected


def select_keypoints(h: Heatmap, params: KeypointParams) -> list[Keypoint]:
    """nms_select with threshold fallback for sparse frames."""
    keypoints = nms_select(h, params.radius, params.threshold, params.max_count)
    for lower in params.fallback_thresholds:
        if len(keypoints) >= params.min_count:
            break
        logger.debug(
            "only %d keypoints at threshold %.3f, retrying at %.3f",
            len(keypoints), params.threshold, lower,
        )
        keypoints = nms_select(h, params.radius, lower, params.max_count)
    return keypoints


def gather_correspondences(kps: Sequence[Keypoint], coords: CoordMap) -> list[Correspondence]:
    """Pair each keypoint with the coordinate predicted at its cell."""
    result = []
    for kp in kps:
        if not (0 <= kp.u < coords.width and 0 <= kp.v < coords.height):
            raise OutOfBounds(
                f"Keypoint ({kp.u}, {kp.v}) outside {coords.width}x{coords.height} coordinate map"
            )
        x, y, z = coords.values[kp.v, kp.u]
        result.append(
            Correspondence(
                pixel=(float(kp.u), float(kp.v)),
                world=(float(x), float(y), float(z)),
                confidence=kp.confidence,
            )
        )
    return result


def split_by_confidence(
    h: Heatmap,
    coords: CoordMap,
    hi_thresh: float,
    lo_score: float,
    count: int,
    radius: int = DEFAULT_RADIUS,
) -> tuple[list[Correspondence], list[Correspondence]]:
    """Two disjoint correspondence sets: confident maxima and the low band.

    The low set holds the `count` local maxima closest to lo_score within
    lo_score +/- 0.05, edges included.
    """
    if not hi_thresh > lo_score:
        raise InvalidConfig(f"hi_thresh ({hi_thresh}) must exceed lo_score ({lo_score})")
    if count < 4:
        raise InvalidConfig(f"count must be >= 4, got {count}")

    floor = max(0.0, min(hi_thresh, lo_score - LOW_BAND - BAND_EPS))
    maxima = nms_select(h, radius, floor, h.width * h.height)

    high = [kp for kp in maxima if kp.confidence >= hi_thresh][:count]
    if len(high) < count:
        raise InsufficientKeypoints("hi", len(high), count)

    taken = {(kp.u, kp.v) for kp in high}
    band = [
        (abs(kp.confidence - lo_score), rank, kp)
        for rank, kp in enumerate(maxima)
        if abs(kp.confidence - lo_score) <= LOW_BAND + BAND_EPS and (kp.u, kp.v) not in taken
    ]
    band.sort(key=lambda item: (item[0], item[1]))
    low = [kp for _, _, kp in band[:count]]
    if len(low) < count:
        raise InsufficientKeypoints("lo", len(low), count)

    return gather_correspondences(high, coords), gather_correspondences(low, coords)


def stack_correspondences(corrs: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Arrays (pixels (N, 2), world (N, 3), confidence (N,))."""
    n = len(corrs)
    pixels = np.empty((n, 2))
    world = np.empty((n, 3))
    confidence = np.empty(n)
    for i, c in enumerate(corrs):
        pixels[i] = c.pixel
        world[i] = c.world
        confidence[i] = c.confidence
    return pixels, world, confidence


def write_keypoints_csv(path: Union[str, Path], kps: Sequence[Keypoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "confidence"])
        for kp in kps:
            writer.writerow([kp.u, kp.v, f"{kp.confidence:.17g}"])
