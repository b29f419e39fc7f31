"""Rigid transforms, pinhole projection and pose-error metrics.

Convention: poses map world to camera, ``X_cam = R @ X_world + t``.
Quaternions are stored scalar-first ``(w, x, y, z)`` with ``w >= 0``.
"""

from dataclasses import dataclass, replace
from functools import cached_property
import math
from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, InvalidConfig, ParseError


MIN_DEPTH = 1e-9

ArrayLike = Union[np.ndarray, tuple, list]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidConfig(f"Focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidConfig(f"Image size must be positive: {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidConfig(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, u: float, v: float) -> bool:
        """True when (u, v) lies inside [0, width) x [0, height)."""
        return 0.0 <= u < self.width and 0.0 <= v < self.height


def _canonical_quaternion(q_xyzw: np.ndarray) -> tuple[float, float, float, float]:
    q = np.asarray(q_xyzw, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not (np.isfinite(norm) and norm > 0):
        raise InvalidConfig("Rotation quaternion must be finite and non-zero")
    if abs(norm - 1.0) > 1e-12:
        q = q / norm
    if q[3] < 0:
        q = -q
    return (float(q[3]), float(q[0]), float(q[1]), float(q[2]))


@dataclass(frozen=True)
class ScenePose:
    """World-to-camera rigid transform."""
    rotation: tuple[float, float, float, float]  # (w, x, y, z)
    translation: tuple[float, float, float]

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.rotation))
        if abs(norm - 1.0) > 1e-9:
            raise InvalidConfig(f"Rotation quaternion is not unit length (norm={norm!r})")
        if len(self.translation) != 3:
            raise InvalidConfig("Translation must have three components")

    @classmethod
    def identity(cls) -> "ScenePose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: ArrayLike) -> "ScenePose":
        """Build from a 3x3 rotation matrix; the quaternion is renormalised."""
        quat = _canonical_quaternion(Rotation.from_matrix(np.asarray(rotation)).as_quat())
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        return cls(quat, (float(t[0]), float(t[1]), float(t[2])))

    @classmethod
    def from_quaternion(cls, wxyz: ArrayLike, translation: ArrayLike) -> "ScenePose":
        w, x, y, z = (float(c) for c in wxyz)
        quat = _canonical_quaternion(np.array([x, y, z, w]))
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        return cls(quat, (float(t[0]), float(t[1]), float(t[2])))

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        matrix = Rotation.from_quat([x, y, z, w]).as_matrix()
        matrix.setflags(write=False)
        return matrix

    @property
    def translation_vector(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, C = -R^T t."""
        return -self.rotation_matrix.T @ self.translation_vector

    def transform(self, points: ArrayLike) -> np.ndarray:
        """Map world points (3,) or (N, 3) into the camera frame."""
        X = np.asarray(points, dtype=np.float64)
        return X @ self.rotation_matrix.T + self.translation_vector


def project_points(
    k: CameraIntrinsics, pose: ScenePose, points: ArrayLike
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection that never raises.

    Returns pixels (N, 2) and camera depths (N,). Pixels of points at or
    behind the MIN_DEPTH plane are set to inf.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pose.transform(X)
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    safe_z = np.where(valid, z, 1.0)
    u = k.fx * cam[:, 0] / safe_z + k.cx
    v = k.fy * cam[:, 1] / safe_z + k.cy
    pixels = np.stack([u, v], axis=1)
    pixels[~valid] = np.inf
    return pixels, z


def project(k: CameraIntrinsics, pose: ScenePose, point: ArrayLike) -> np.ndarray:
    """Project world point(s) to pixels; raises BehindCamera on non-positive depth."""
    X = np.asarray(point, dtype=np.float64)
    pixels, depths = project_points(k, pose, X)
    bad = np.flatnonzero(depths <= MIN_DEPTH)
    if bad.size:
        raise BehindCamera(
            f"Point {int(bad[0])} has depth {depths[bad[0]]:.3g} <= {MIN_DEPTH}",
            index=int(bad[0]),
        )
    return pixels[0] if X.ndim == 1 else pixels


def backproject(
    k: CameraIntrinsics, pose: ScenePose, pixel: ArrayLike, depth: Union[float, np.ndarray]
) -> np.ndarray:
    """World point(s) seen at pixel(s) (2,) or (N, 2) with camera depth(s)."""
    p = np.asarray(pixel, dtype=np.float64)
    p2 = np.atleast_2d(p)
    d = np.broadcast_to(np.asarray(depth, dtype=np.float64), (p2.shape[0],))
    cam = np.stack(
        [(p2[:, 0] - k.cx) / k.fx * d, (p2[:, 1] - k.cy) / k.fy * d, d], axis=1
    )
    world = (cam - pose.translation_vector) @ pose.rotation_matrix
    return world[0] if p.ndim == 1 else world


def rotation_angle_deg(relative: np.ndarray) -> float:
    """Angle of a rotation matrix in degrees.

    atan2 form of arccos(clamp((trace - 1) / 2, -1, 1)); keeps full
    precision near the identity.
    """
    cos_part = (np.trace(relative) - 1.0) / 2.0
    skew = np.array(
        [
            relative[2, 1] - relative[1, 2],
            relative[0, 2] - relative[2, 0],
            relative[1, 0] - relative[0, 1],
        ]
    )
    sin_part = np.linalg.norm(skew) / 2.0
    return math.degrees(math.atan2(sin_part, max(-1.0, min(1.0, cos_part))))


def pose_errors(est: ScenePose, gt: ScenePose) -> tuple[float, float]:
    """Camera-centre distance (scene units) and rotation angle (degrees)."""
    trans_err = float(np.linalg.norm(est.center - gt.center))
    relative = est.rotation_matrix @ gt.rotation_matrix.T
    return trans_err, rotation_angle_deg(relative)


def _rz(theta_deg: float) -> np.ndarray:
    a = math.radians(theta_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_inplane_rotation(pose: ScenePose, theta: float) -> ScenePose:
    """Rotate the camera about its optical axis by theta degrees.

    Projections through the result equal the original projections rotated
    by theta about the principal point (for fx == fy).
    """
    if theta == 0:
        return pose
    rz = _rz(theta)
    return ScenePose.from_matrix(rz @ pose.rotation_matrix, rz @ pose.translation_vector)


def scale_intrinsics(k: CameraIntrinsics, s: float) -> CameraIntrinsics:
    """Scale focal lengths, principal point and image size by s."""
    if not s > 0:
        raise InvalidConfig(f"Scale factor must be positive: {s}")
    return CameraIntrinsics(
        fx=k.fx * s,
        fy=k.fy * s,
        cx=k.cx * s,
        cy=k.cy * s,
        width=max(1, int(round(k.width * s))),
        height=max(1, int(round(k.height * s))),
    )


def recenter_intrinsics(scaled: CameraIntrinsics, canvas: CameraIntrinsics) -> CameraIntrinsics:
    """Keep the scaled focal lengths on the original canvas and principal point."""
    return replace(canvas, fx=scaled.fx, fy=scaled.fy)


def format_pose_line(image_id: int, pose: ScenePose) -> str:
    """``image_id qw qx qy qz tx ty tz`` with 17 significant digits."""
    values = list(pose.rotation) + list(pose.translation)
    return " ".join([str(image_id)] + [f"{v:.17g}" for v in values])


def parse_pose_line(line: str, line_no: int = 1) -> tuple[int, ScenePose]:
    parts = line.split()
    if len(parts) < 8:
        raise ParseError(
            f"Pose line needs 8 fields, got {len(parts)}",
            source_line_no=line_no,
            source_text=line.strip(),
        )
    try:
        image_id = int(parts[0])
        values = [float(p) for p in parts[1:8]]
    except ValueError:
        raise ParseError(
            "Pose line has non-numeric fields",
            source_line_no=line_no,
            source_text=line.strip(),
        )
    return image_id, ScenePose.from_quaternion(values[:4], values[4:])


def quaternions_equal(a: ScenePose, b: ScenePose, tol: float = 1e-9) -> bool:
    """Quaternion equality up to sign."""
    qa, qb = np.array(a.rotation), np.array(b.rotation)
    return bool(min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) <= tol)
