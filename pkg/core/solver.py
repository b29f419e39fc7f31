"""Geometric pose estimation: P3P, DLT, RANSAC and Gauss-Newton refinement."""

from dataclasses import dataclass
import logging
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    InvalidConfig,
    NoValidHypothesis,
    RankDeficient,
    TooFewCorrespondences,
    TooFewInliers,
)
from .geometry import MIN_DEPTH, CameraIntrinsics, ScenePose, format_pose_line
from .keypoints import Correspondence, stack_correspondences


logger = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-9
# Minimum sigma_11 / sigma_12 ratio of the DLT design matrix
SVD_GAP = 1e6
P3P_RESIDUAL_TOL = 1e-6
MAX_HALVINGS = 10
SCORE_CHUNK = 64


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 100
    inlier_threshold_px: float = 3.0
    refine_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidConfig(f"RANSAC iterations must be >= 1, got {self.iterations}")
        if not self.inlier_threshold_px > 0:
            raise InvalidConfig(f"Inlier threshold must be positive, got {self.inlier_threshold_px}")
        if self.refine_iterations < 0:
            raise InvalidConfig(f"refine_iterations must be >= 0, got {self.refine_iterations}")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: ScenePose
    inlier_mask: np.ndarray
    inlier_count: int
    mean_error: float

    def to_line(self, image_id: int) -> str:
        return (
            f"{format_pose_line(image_id, self.pose)} "
            f"inliers={self.inlier_count}/{len(self.inlier_mask)} mean_err={self.mean_error:.6f}"
        )

    def to_dict(self) -> dict:
        return {
            "rotation": list(self.pose.rotation),
            "translation": list(self.pose.translation),
            "inlier_mask": [bool(b) for b in self.inlier_mask],
            "inlier_count": self.inlier_count,
            "mean_error": self.mean_error,
        }


# Shared helpers

def _bearings(pixels: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Unit viewing rays for pixels (..., 2)."""
    rays = np.stack(
        [(pixels[..., 0] - k.cx) / k.fx, (pixels[..., 1] - k.cy) / k.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _reprojection_errors(R: np.ndarray, t: np.ndarray, pixels: np.ndarray, world: np.ndarray, k: CameraIntrinsics):
    """Per-point pixel errors (inf behind the camera) for one pose."""
    cam = world @ R.T + t
    z = cam[:, 2]
    front = z > MIN_DEPTH
    safe = np.where(front, z, 1.0)
    du = k.fx * cam[:, 0] / safe + k.cx - pixels[:, 0]
    dv = k.fy * cam[:, 1] / safe + k.cy - pixels[:, 1]
    return np.where(front, np.hypot(du, dv), np.inf)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched rigid alignment dst ~ R @ src + t for (B, N, 3) arrays."""
    cs = src.mean(axis=1)
    cd = dst.mean(axis=1)
    H = np.einsum("bni,bnj->bij", src - cs[:, None], dst - cd[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.swapaxes(Vt, 1, 2) @ D @ np.swapaxes(U, 1, 2)
    t = cd - np.einsum("bij,bj->bi", R, cs)
    return R, t


def _degenerate_samples(pixels: np.ndarray, world: np.ndarray) -> np.ndarray:
    """Collinear world triangles or repeated pixels, per sample of (B, 3, ...)."""
    e1 = world[:, 1] - world[:, 0]
    e2 = world[:, 2] - world[:, 0]
    e3 = world[:, 2] - world[:, 1]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    longest = np.max(np.stack([(e1**2).sum(1), (e2**2).sum(1), (e3**2).sum(1)], axis=1), axis=1)
    collinear = ~(area > COLLINEAR_TOL * longest)
    p = pixels
    same = (
        (np.linalg.norm(p[:, 0] - p[:, 1], axis=1) < 1e-12)
        | (np.linalg.norm(p[:, 0] - p[:, 2], axis=1) < 1e-12)
        | (np.linalg.norm(p[:, 1] - p[:, 2], axis=1) < 1e-12)
    )
    return collinear | same


def _polymul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched product of ascending-order coefficient arrays."""
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[1]):
        out[:, i : i + b.shape[1]] += a[:, i : i + 1] * b
    return out


def _quartic_roots(coeffs: np.ndarray) -> np.ndarray:
    """Complex roots (B, 4) of ascending quartics; NaN where a root is missing."""
    B = coeffs.shape[0]
    roots = np.full((B, 4), np.nan, dtype=np.complex128)
    lead = coeffs[:, 4]
    scale = np.abs(coeffs).max(axis=1)
    regular = np.abs(lead) > 1e-12 * scale
    if np.any(regular):
        monic = coeffs[regular, :4] / lead[regular, None]
        companion = np.zeros((monic.shape[0], 4, 4))
        companion[:, 1:, :3] = np.eye(3)
        companion[:, :, 3] = -monic
        roots[regular] = np.linalg.eigvals(companion)
    for b in np.flatnonzero(~regular & (scale > 0)):
        r = np.roots(coeffs[b, ::-1])
        roots[b, : len(r)] = r
    return roots


def _polyval(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ascending coefficients (B, d) at x (B, m)."""
    out = np.zeros_like(x)
    for i in range(coeffs.shape[1] - 1, -1, -1):
        out = out * x + coeffs[:, i : i + 1]
    return out


def _p3p_batch(pixels: np.ndarray, world: np.ndarray, k: CameraIntrinsics):
    """Grunert P3P over B samples.

    Returns (sample index (M,), R (M, 3, 3), t (M, 3)) for every candidate
    with all three points in front of the camera. Degenerate samples yield
    no candidates.
    """
    valid = ~_degenerate_samples(pixels, world)
    idx = np.flatnonzero(valid)
    empty = (np.zeros(0, dtype=np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    if idx.size == 0:
        return empty
    P = world[idx]
    f = _bearings(pixels[idx], k)

    a2 = ((P[:, 1] - P[:, 2]) ** 2).sum(axis=1)
    b2 = ((P[:, 0] - P[:, 2]) ** 2).sum(axis=1)
    c2 = ((P[:, 0] - P[:, 1]) ** 2).sum(axis=1)
    ca = (f[:, 1] * f[:, 2]).sum(axis=1)
    cb = (f[:, 0] * f[:, 2]).sum(axis=1)
    cg = (f[:, 0] * f[:, 1]).sum(axis=1)

    # u = s2/s1, v = s3/s1; u = N(v) / D(v) and the quartic in v follows.
    K = (a2 - c2) / b2
    r = c2 / b2
    one = np.ones_like(K)
    Q = np.stack([one, -2 * cb, one], axis=1)
    N = np.stack([1 + K, -2 * K * cb, K - 1], axis=1)
    D = np.stack([2 * cg, -2 * ca], axis=1)
    rest = np.stack([1 - r, 2 * r * cb, -r], axis=1)
    quartic = _polymul(N, N)
    quartic[:, :4] -= 2 * cg[:, None] * _polymul(N, D)
    quartic += _polymul(rest, _polymul(D, D))

    roots = _quartic_roots(quartic)
    real = np.isfinite(roots) & (np.abs(roots.imag) <= 1e-6 * (1 + np.abs(roots.real)))
    v = np.where(real, roots.real, 0.0)
    dq = quartic[:, 1:] * np.arange(1, 5)
    for _ in range(2):
        slope = _polyval(dq, v)
        step = np.where(np.abs(slope) > 1e-300, _polyval(quartic, v) / np.where(slope == 0, 1, slope), 0.0)
        v = v - np.where(real, step, 0.0)

    num = _polyval(N, v)
    den = _polyval(D, v)
    ok = real & (v > 0) & (np.abs(den) > 1e-12)
    u = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    ok &= u > 0
    denom_s1 = 1 + u * u - 2 * u * cg[:, None]
    ok &= denom_s1 > 1e-15
    s1 = np.sqrt(np.where(ok, c2[:, None] / np.where(ok, denom_s1, 1.0), 0.0))

    sample, root = np.nonzero(ok)
    if sample.size == 0:
        return empty
    s1 = s1[sample, root]
    dist = np.stack([s1, u[sample, root] * s1, v[sample, root] * s1], axis=1)
    cam = f[sample] * dist[:, :, None]
    R, t = _kabsch(P[sample], cam)
    depth = np.einsum("mij,mnj->mni", R, P[sample])[:, :, 2] + t[:, 2:3]
    front = np.all(depth > MIN_DEPTH, axis=1)
    return idx[sample[front]], R[front], t[front]


# Refinement

def _objective(R, t, pixels, world, k):
    cam = world @ R.T + t
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH):
        return np.inf
    du = k.fx * cam[:, 0] / z + k.cx - pixels[:, 0]
    dv = k.fy * cam[:, 1] / z + k.cy - pixels[:, 1]
    return float(np.sum(du * du + dv * dv))


def _gauss_newton(R, t, pixels, world, k, iterations) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Minimise squared reprojection error with left rotation increments."""
    n = len(world)
    cost = _objective(R, t, pixels, world, k)
    trace = [cost]
    for _ in range(iterations):
        if cost <= 1e-20 * n:
            break
        rotated = world @ R.T
        cam = rotated + t
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        residual = np.concatenate([k.fx * x / z + k.cx - pixels[:, 0], k.fy * y / z + k.cy - pixels[:, 1]])

        d_proj = np.zeros((2 * n, 3))
        d_proj[:n, 0] = k.fx / z
        d_proj[:n, 2] = -k.fx * x / z**2
        d_proj[n:, 1] = k.fy / z
        d_proj[n:, 2] = -k.fy * y / z**2
        # d cam / d omega = -[R X]_x
        rx, ry, rz = rotated[:, 0], rotated[:, 1], rotated[:, 2]
        d_rot = np.zeros((n, 3, 3))
        d_rot[:, 0, 1], d_rot[:, 0, 2] = rz, -ry
        d_rot[:, 1, 0], d_rot[:, 1, 2] = -rz, rx
        d_rot[:, 2, 0], d_rot[:, 2, 1] = ry, -rx
        rows = np.concatenate([d_rot, d_rot])
        J = np.concatenate([np.einsum("mi,mij->mj", d_proj, rows), d_proj], axis=1)
        delta = np.linalg.lstsq(J, -residual, rcond=None)[0]
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) < 1e-15:
            break

        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            R_new = Rotation.from_rotvec(alpha * delta[:3]).as_matrix() @ R
            t_new = t + alpha * delta[3:]
            new_cost = _objective(R_new, t_new, pixels, world, k)
            if new_cost <= cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        improved = new_cost < cost
        R, t, cost = R_new, t_new, new_cost
        trace.append(cost)
        if not improved:
            break
    return R, t, trace


def _as_arrays(corrs: Sequence[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    pixels, world, _ = stack_correspondences(corrs)
    return pixels, world


def refine_pose_traced(
    initial: ScenePose,
    inliers: Sequence[Correspondence],
    k: CameraIntrinsics,
    iterations: int = 10,
) -> tuple[ScenePose, list[float]]:
    """refine_pose plus the objective after every accepted step."""
    if len(inliers) < 4:
        raise TooFewInliers(f"Refinement needs at least 4 inliers, got {len(inliers)}")
    pixels, world = _as_arrays(inliers)
    return _refine_arrays(initial, pixels, world, k, iterations)


def _refine_arrays(initial, pixels, world, k, iterations):
    R0 = np.array(initial.rotation_matrix)
    t0 = initial.translation_vector
    R, t, trace = _gauss_newton(R0, t0, pixels, world, k, iterations)
    if len(trace) == 1:
        return initial, trace
    return ScenePose.from_matrix(R, t), trace


def refine_pose(
    initial: ScenePose,
    inliers: Sequence[Correspondence],
    k: CameraIntrinsics,
    iterations: int = 10,
) -> ScenePose:
    """Gauss-Newton polish of a pose on its inlier correspondences."""
    return refine_pose_traced(initial, inliers, k, iterations)[0]


# Minimal and linear solvers

def p3p_solve(corrs: Sequence[Correspondence], k: CameraIntrinsics) -> list[ScenePose]:
    """Up to four poses consistent with exactly three correspondences."""
    if len(corrs) != 3:
        raise DimensionMismatch(f"P3P needs exactly 3 correspondences, got {len(corrs)}")
    pixels, world = _as_arrays(corrs)
    if _degenerate_samples(pixels[None], world[None])[0]:
        raise DegenerateConfiguration("P3P input is collinear or has repeated pixels")
    _, Rs, ts = _p3p_batch(pixels[None], world[None], k)

    poses: list[ScenePose] = []
    for R, t in zip(Rs, ts):
        R, t, _ = _gauss_newton(R, t, pixels, world, k, 5)
        if _reprojection_errors(R, t, pixels, world, k).max() > P3P_RESIDUAL_TOL:
            continue
        pose = ScenePose.from_matrix(R, t)
        duplicate = any(
            np.abs(pose.rotation_matrix - p.rotation_matrix).max() < 1e-9
            and np.abs(pose.translation_vector - p.translation_vector).max() < 1e-9
            for p in poses
        )
        if not duplicate:
            poses.append(pose)
    return poses


def dlt_solve(corrs: Sequence[Correspondence], k: CameraIntrinsics) -> ScenePose:
    """Linear camera-matrix estimate from six or more exact correspondences.

    The design matrix must have a single null direction: its two smallest
    singular values must be at least SVD_GAP apart. Noisy input fails that test
    and raises RankDeficient; use ransac_pnp for measured data.
    """
    if len(corrs) < 6:
        raise DegenerateConfiguration(f"DLT needs at least 6 correspondences, got {len(corrs)}")
    pixels, world = _as_arrays(corrs)
    n = len(world)

    xn = (pixels[:, 0] - k.cx) / k.fx
    yn = (pixels[:, 1] - k.cy) / k.fy
    center = world.mean(axis=0)
    rms = np.sqrt(((world - center) ** 2).sum(axis=1).mean())
    if not rms > 0:
        raise DegenerateConfiguration("All world points coincide")
    s = np.sqrt(3.0) / rms
    Xh = np.hstack([(world - center) * s, np.ones((n, 1))])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -yn[:, None] * Xh
    _, sigma, Vt = np.linalg.svd(A)
    if not sigma[10] > SVD_GAP * sigma[11]:
        raise RankDeficient(
            f"DLT system has no isolated null direction (sigma ratio {sigma[10] / max(sigma[11], 1e-300):.3g})"
        )

    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, S, Wt = np.linalg.svd(M)
    R = U @ Wt
    if np.linalg.det(R) < 0:
        raise DegenerateConfiguration("DLT camera matrix has no proper rotation")
    t_norm = P[:, 3] / S.mean()
    t = t_norm / s - R @ center

    depths = (world @ R.T + t)[:, 2]
    if np.count_nonzero(depths > 0) * 2 < n:
        raise DegenerateConfiguration("DLT solution places most points behind the camera")
    return ScenePose.from_matrix(R, t)


# RANSAC

def _score(Rs, ts, pixels, world, k, threshold):
    """Inlier counts and mean inlier errors for M candidate poses."""
    counts = np.zeros(len(Rs), dtype=np.int64)
    means = np.full(len(Rs), np.inf)
    for start in range(0, len(Rs), SCORE_CHUNK):
        R = Rs[start : start + SCORE_CHUNK]
        t = ts[start : start + SCORE_CHUNK]
        cam = np.einsum("mij,nj->mni", R, world) + t[:, None, :]
        z = cam[..., 2]
        front = z > MIN_DEPTH
        safe = np.where(front, z, 1.0)
        du = k.fx * cam[..., 0] / safe + k.cx - pixels[:, 0]
        dv = k.fy * cam[..., 1] / safe + k.cy - pixels[:, 1]
        err = np.hypot(du, dv)
        inlier = front & (err <= threshold)
        c = inlier.sum(axis=1)
        counts[start : start + len(R)] = c
        total = np.where(inlier, err, 0.0).sum(axis=1)
        means[start : start + len(R)] = np.where(c > 0, total / np.maximum(c, 1), np.inf)
    return counts, means


def ransac_pnp_arrays(pixels: np.ndarray, world: np.ndarray, k: CameraIntrinsics, cfg: RansacConfig) -> PoseEstimate:
    """ransac_pnp on stacked (N, 2) pixels and (N, 3) world points."""
    pixels = np.asarray(pixels, dtype=np.float64)
    world = np.asarray(world, dtype=np.float64)
    n = len(world)
    if pixels.shape != (n, 2) or world.shape != (n, 3):
        raise DimensionMismatch(f"Correspondence arrays disagree: {pixels.shape} vs {world.shape}")
    if n < 4:
        raise TooFewCorrespondences(f"RANSAC needs at least 4 correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(cfg.iterations)])
    _, Rs, ts = _p3p_batch(pixels[samples], world[samples], k)
    if len(Rs) == 0:
        raise NoValidHypothesis(f"All {cfg.iterations} RANSAC samples were degenerate")

    counts, means = _score(Rs, ts, pixels, world, k, cfg.inlier_threshold_px)
    best = int(np.lexsort((np.arange(len(Rs)), means, -counts))[0])
    R, t = Rs[best], ts[best]
    errors = _reprojection_errors(R, t, pixels, world, k)
    mask = errors <= cfg.inlier_threshold_px
    mean_error = float(errors[mask].mean()) if mask.any() else float("inf")
    pose = ScenePose.from_matrix(R, t)

    if mask.sum() >= 4 and cfg.refine_iterations > 0:
        refined, _ = _refine_arrays(pose, pixels[mask], world[mask], k, cfg.refine_iterations)
        refined_errors = _reprojection_errors(
            np.array(refined.rotation_matrix), refined.translation_vector, pixels[mask], world[mask], k
        )
        refined_mean = float(refined_errors.mean())
        if refined_mean <= mean_error and refined_errors.max() <= cfg.inlier_threshold_px:
            pose, mean_error = refined, refined_mean

    logger.debug(
        "ransac: %d candidates from %d rounds, %d/%d inliers, mean error %.4f px",
        len(Rs), cfg.iterations, int(mask.sum()), n, mean_error,
    )
    return PoseEstimate(pose=pose, inlier_mask=mask, inlier_count=int(mask.sum()), mean_error=mean_error)


def ransac_pnp(corrs: Sequence[Correspondence], k: CameraIntrinsics, cfg: Optional[RansacConfig] = None) -> PoseEstimate:
    """Fixed-iteration P3P RANSAC followed by refinement on the best inlier set."""
    if len(corrs) < 4:
        raise TooFewCorrespondences(f"RANSAC needs at least 4 correspondences, got {len(corrs)}")
    pixels, world = _as_arrays(corrs)
    return ransac_pnp_arrays(pixels, world, k, cfg or RansacConfig())
