"""Training objective: patch cosine heatmap loss, reprojection loss, 3D loss.

Every loss returns (value, gradient with respect to the prediction).
Norms in the reprojection and 3D losses are unsquared L2.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DimensionMismatch, InvalidConfig
from .geometry import CameraIntrinsics, ScenePose


DEFAULT_PATCH = 8
DEPTH_MIN = 0.1
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_sim: float = 1.0
    lambda_rep: float = 0.1
    lambda_3d: float = 1.0

    def __post_init__(self):
        weights = (self.lambda_sim, self.lambda_rep, self.lambda_3d)
        if any(w < 0 for w in weights):
            raise InvalidConfig(f"Loss weights must be non-negative: {weights}")
        if not any(w > 0 for w in weights):
            raise InvalidConfig("At least one loss weight must be positive")


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Non-overlapping N x N tiles of an H x W grid; remainders are cropped."""
    patch_size: int
    rows: int  # tiles per column
    cols: int  # tiles per row

    @classmethod
    def for_shape(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 2:
            raise InvalidConfig(f"Patch size must be >= 2, got {patch_size}")
        return cls(patch_size, height // patch_size, width // patch_size)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def offsets(self) -> list[tuple[int, int]]:
        n = self.patch_size
        return [(r * n, c * n) for r in range(self.rows) for c in range(self.cols)]

    def extract(self, grid: np.ndarray) -> np.ndarray:
        """(count, N*N) flattened patches in row-major tile order."""
        n = self.patch_size
        cropped = grid[: self.rows * n, : self.cols * n]
        tiles = cropped.reshape(self.rows, n, self.cols, n).transpose(0, 2, 1, 3)
        return tiles.reshape(self.count, n * n)

    def scatter(self, patches: np.ndarray, height: int, width: int) -> np.ndarray:
        """Inverse of extract, zero on cropped cells."""
        n = self.patch_size
        out = np.zeros((height, width))
        tiles = patches.reshape(self.rows, self.cols, n, n).transpose(0, 2, 1, 3)
        out[: self.rows * n, : self.cols * n] = tiles.reshape(self.rows * n, self.cols * n)
        return out


def loss_sim(pred: np.ndarray, target: np.ndarray, patch_size: int = DEFAULT_PATCH) -> tuple[float, np.ndarray]:
    """1 - mean patch cosine similarity between predicted and target heatmaps.

    Both-zero patches count as cosine 1, one-zero patches as 0; neither
    contributes gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionMismatch(f"Heatmap shapes differ: {pred.shape} vs {target.shape}")
    grid = PatchGrid.for_shape(pred.shape[0], pred.shape[1], patch_size)
    if grid.count == 0:
        raise DimensionMismatch(f"Heatmap {pred.shape} is smaller than one {patch_size}x{patch_size} patch")

    a = grid.extract(pred)
    b = grid.extract(target)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    a_zero = na < NORM_FLOOR
    b_zero = nb < NORM_FLOOR
    regular = ~a_zero & ~b_zero

    cos = np.where(a_zero & b_zero, 1.0, 0.0)
    dot = np.einsum("ij,ij->i", a, b)
    denom = np.where(regular, na * nb, 1.0)
    cos = np.where(regular, dot / denom, cos)

    # d cos / d a = b / (|a||b|) - (a.b) a / (|a|^3 |b|)
    safe_na = np.where(regular, na, 1.0)
    dcos = b / denom[:, None] - (dot / (denom * safe_na**2))[:, None] * a
    dcos[~regular] = 0.0

    loss = 1.0 - float(np.sum(cos)) / grid.count
    grad = grid.scatter(-dcos / grid.count, *pred.shape)
    return loss, grad


def _as_points(values, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if arr.shape[1] != 3:
        raise DimensionMismatch(f"{name} must be (M, 3), got {arr.shape}")
    return arr


def loss_rep(
    coords,
    pixels,
    k: CameraIntrinsics,
    gt: ScenePose,
) -> tuple[float, np.ndarray]:
    """Mean pixel distance between keypoints and projected predicted points."""
    X = _as_points(coords, "coords")
    x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if x.shape != (X.shape[0], 2) or X.shape[0] == 0:
        raise DimensionMismatch(f"Need matching non-empty lists, got {X.shape} and {x.shape}")

    R = gt.rotation_matrix
    cam = X @ R.T + gt.translation_vector
    z = cam[:, 2]
    behind = np.flatnonzero(z <= DEPTH_MIN)
    if behind.size:
        i = int(behind[0])
        raise BehindCamera(f"Predicted point {i} has depth {z[i]:.3g} <= {DEPTH_MIN}", index=i)

    proj = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    residual = proj - x
    norms = np.linalg.norm(residual, axis=1)
    m = X.shape[0]
    loss = float(np.sum(norms)) / m

    live = norms >= NORM_FLOOR
    unit = np.zeros_like(residual)
    unit[live] = residual[live] / norms[live, None]
    # d proj / d cam, per point
    d_cam = np.zeros((m, 3))
    d_cam[:, 0] = unit[:, 0] * k.fx / z
    d_cam[:, 1] = unit[:, 1] * k.fy / z
    d_cam[:, 2] = -(unit[:, 0] * k.fx * cam[:, 0] + unit[:, 1] * k.fy * cam[:, 1]) / z**2
    grads = d_cam @ R / m
    return loss, grads


def loss_3d(pred, gt) -> tuple[float, np.ndarray]:
    """Mean Euclidean distance between predicted and reference scene coordinates."""
    P = _as_points(pred, "pred")
    G = _as_points(gt, "gt")
    if P.shape != G.shape or P.shape[0] == 0:
        raise DimensionMismatch(f"Need matching non-empty lists, got {P.shape} and {G.shape}")
    diff = P - G
    norms = np.linalg.norm(diff, axis=1)
    m = P.shape[0]
    live = norms >= NORM_FLOOR
    grads = np.zeros_like(diff)
    grads[live] = diff[live] / (m * norms[live, None])
    return float(np.sum(norms)) / m, grads


def loss_all(sim: float, rep: float, l3d: float, w: LossWeights) -> float:
    """Weighted sum of the three losses."""
    return w.lambda_sim * sim + w.lambda_rep * rep + w.lambda_3d * l3d
