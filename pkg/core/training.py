"""Staged training of the scene regressor.

Stage 1 fits the encoder and coordinate branch with the 3D loss only;
stage 2 fits every parameter with the weighted sum of all three losses.
Randomness is derived per global sample index, so a run interrupted at a
checkpoint and resumed is identical to an uninterrupted one.
"""

import csv
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import EmptyDataset, InvalidConfig
from .geometry import (
    CameraIntrinsics,
    ScenePose,
    compose_inplane_rotation,
    project_points,
    recenter_intrinsics,
    scale_intrinsics,
)
from .losses import DEPTH_MIN, DEFAULT_PATCH, LossWeights, loss_3d, loss_all, loss_rep, loss_sim
from .regressor import AdamState, Normalization, Regressor, TrainingProgress, adam_step
from .scene import Heatmap, reference_heatmap, rounded_cells
from .synthetic import RegionClass, SyntheticScene, ground_truth_coords


logger = logging.getLogger(__name__)

ORDER_STREAM = 1
AUGMENT_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 1
    scale_range: tuple[float, float] = (2 / 3, 3 / 2)
    rotation_deg: float = 30.0
    color_jitter: float = 0.1
    augment: bool = True
    patch_size: int = DEFAULT_PATCH
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise InvalidConfig("Iteration counts must be >= 0")
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidConfig(f"Adam betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if not self.epsilon > 0 or self.weight_decay < 0:
            raise InvalidConfig("epsilon must be positive and weight_decay non-negative")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidConfig(f"Invalid scale range {self.scale_range}")
        if self.rotation_deg < 0 or not 0 <= self.color_jitter < 1:
            raise InvalidConfig("rotation_deg must be >= 0 and color_jitter within [0, 1)")

    def to_dict(self) -> dict:
        return {
            "stage1_iters": self.stage1_iters,
            "stage2_iters": self.stage2_iters,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
            "lambda_sim": self.weights.lambda_sim,
            "lambda_rep": self.weights.lambda_rep,
            "lambda_3d": self.weights.lambda_3d,
            "batch_size": self.batch_size,
            "scale_range": list(self.scale_range),
            "rotation_deg": self.rotation_deg,
            "color_jitter": self.color_jitter,
            "augment": self.augment,
            "patch_size": self.patch_size,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One frame: image, reference heatmap, keypoint pixels with world targets, GT camera."""
    image: np.ndarray
    heatmap: Heatmap
    pixels: np.ndarray  # (M, 2) reference keypoint cells
    world: np.ndarray  # (M, 3)
    pose: ScenePose
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class TrainLogRow:
    iteration: int
    stage: int
    sim: float
    rep: float
    l3d: float
    all: float


@dataclass
class TrainResult:
    log: list[TrainLogRow]
    progress: TrainingProgress


def samples_from_scene(
    scene: SyntheticScene,
    image_ids: Optional[Sequence[int]] = None,
    images: Optional[Mapping[int, np.ndarray]] = None,
) -> list[TrainingSample]:
    """Training samples for a SyntheticScene using discriminative points as reliable.

    Keypoint targets are the reference cells whose rendered splat belongs to a
    discriminative point. Frames missing from `images` are rendered.
    """
    reliable = scene.reliable_model()
    samples = []
    for image_id in image_ids if image_ids is not None else scene.model.image_ids:
        frame = scene.model.frame(image_id)
        rendered, labels = scene.render(image_id)
        image = images[image_id] if images is not None and image_id in images else rendered
        heat = reference_heatmap(reliable, image_id)
        coords, valid = ground_truth_coords(scene, image_id)
        seen = valid & labels.mask(RegionClass.DISCRIMINATIVE)
        rows, cols = np.nonzero((heat.values > 0) & seen)
        samples.append(
            TrainingSample(
                image=image,
                heatmap=heat,
                pixels=np.stack([cols, rows], axis=1).astype(np.float64),
                world=coords.values[rows, cols],
                pose=frame.pose,
                intrinsics=frame.intrinsics,
            )
        )
    return samples


@dataclass(frozen=True, eq=False)
class _Augmented:
    image: np.ndarray
    target: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    world: np.ndarray
    pose: ScenePose
    intrinsics: CameraIntrinsics


def _warp(image: np.ndarray, k: CameraIntrinsics, scale: float, theta_deg: float) -> np.ndarray:
    """Nearest-neighbour zoom and in-plane rotation about the principal point."""
    a = math.radians(theta_deg)
    c, s = math.cos(a), math.sin(a)
    # input (row, col) = M @ output (row, col) + offset
    M = np.array(
        [[c / scale, -s * k.fy / (scale * k.fx)], [s * k.fx / (scale * k.fy), c / scale]]
    )
    center = np.array([k.cy, k.cx])
    offset = center - M @ center
    return np.stack(
        [
            ndimage.affine_transform(image[:, :, ch], M, offset=offset, order=0, mode="constant", cval=0.0)
            for ch in range(3)
        ],
        axis=2,
    )


def augment_sample(sample: TrainingSample, tc: TrainConfig, rng: np.random.Generator) -> _Augmented:
    k, pose = sample.intrinsics, sample.pose
    image = sample.image
    scale = float(rng.uniform(*tc.scale_range))
    theta = float(rng.uniform(-tc.rotation_deg, tc.rotation_deg))
    jitter = rng.uniform(1 - tc.color_jitter, 1 + tc.color_jitter, size=3)
    if tc.augment:
        k = recenter_intrinsics(scale_intrinsics(k, scale), k)
        pose = compose_inplane_rotation(pose, theta)
        image = np.clip(_warp(image, sample.intrinsics, scale, theta) * jitter, 0.0, 1.0)

    target = np.zeros((k.height, k.width))
    if len(sample.world):
        pixels, depth = project_points(k, pose, sample.world)
        rows, cols, inside = rounded_cells(pixels, k.width, k.height)
        inside &= depth > 0
        flat = rows * k.width + cols
        _, first = np.unique(np.where(inside, flat, -1), return_index=True)
        keep = np.zeros(len(flat), dtype=bool)
        keep[first] = True
        keep &= inside
        rows, cols, world = rows[keep], cols[keep], sample.world[keep]
        target[rows, cols] = 1.0
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        world = np.zeros((0, 3))
    return _Augmented(image, target, rows, cols, world, pose, k)


def _sample_losses(model: Regressor, aug: _Augmented, tc: TrainConfig, stage: int):
    """Forward, losses and upstream gradients for one augmented sample."""
    out = model.forward(aug.image)
    w = tc.weights
    H, W = aug.target.shape
    grad_heat = np.zeros((H, W))
    grad_coords = np.zeros((H, W, 3))

    sim, g_sim = loss_sim(out.heatmap.values, aug.target, tc.patch_size)
    l3d = rep = 0.0
    if len(aug.world):
        pred = out.coords.values[aug.rows, aug.cols]
        l3d, g_3d = loss_3d(pred, aug.world)
        grad_coords[aug.rows, aug.cols] += w.lambda_3d * g_3d

        depth = aug.pose.transform(pred)[:, 2]
        front = depth > DEPTH_MIN
        if not front.all():
            logger.debug("L_rep skips %d of %d points behind the camera", int((~front).sum()), len(front))
        if front.any():
            pixels = np.stack([aug.cols[front], aug.rows[front]], axis=1).astype(np.float64)
            rep, g_rep = loss_rep(pred[front], pixels, aug.intrinsics, aug.pose)
            if stage == 2:
                grad_coords[aug.rows[front], aug.cols[front]] += w.lambda_rep * g_rep
    if stage == 2:
        grad_heat = w.lambda_sim * g_sim
    total = loss_all(sim, rep, l3d, w) if stage == 2 else w.lambda_3d * l3d
    return (sim, rep, l3d, total), grad_heat, grad_coords


class _SampleOrder:
    """Per-epoch permutations keyed by epoch index."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self._epoch = -1
        self._perm = np.arange(n)

    def __getitem__(self, counter: int) -> int:
        epoch, pos = divmod(counter, self.n)
        if epoch != self._epoch:
            self._perm = np.random.default_rng([self.seed, ORDER_STREAM, epoch]).permutation(self.n)
            self._epoch = epoch
        return int(self._perm[pos])


def train_staged(
    model: Regressor,
    dataset: Sequence[TrainingSample],
    tc: TrainConfig,
    progress: Optional[TrainingProgress] = None,
) -> TrainResult:
    """Run (or continue) both training stages up to the configured iteration counts."""
    if not dataset:
        raise EmptyDataset("Training dataset is empty")
    if progress is None:
        progress = TrainingProgress(AdamState())
        model.with_normalization(
            Normalization.from_data(
                [s.image for s in dataset],
                np.concatenate([s.world for s in dataset]) if any(len(s.world) for s in dataset) else np.zeros((0, 3)),
            )
        )

    order = _SampleOrder(len(dataset), tc.seed)
    stage1_names = model.encoder_names + model.coord_names
    all_names = model.parameter_names
    log: list[TrainLogRow] = []
    state = progress.adam
    done = {1: progress.stage1_done, 2: progress.stage2_done}

    for stage, total_iters, names in ((1, tc.stage1_iters, stage1_names), (2, tc.stage2_iters, all_names)):
        while done[stage] < total_iters:
            iteration = done[1] + done[2]
            params = model.parameters
            acc = {name: np.zeros_like(params[name]) for name in names}
            losses = np.zeros(4)
            for b in range(tc.batch_size):
                counter = iteration * tc.batch_size + b
                sample = dataset[order[counter]]
                rng = np.random.default_rng([tc.seed, AUGMENT_STREAM, counter])
                aug = augment_sample(sample, tc, rng)
                values, grad_heat, grad_coords = _sample_losses(model, aug, tc, stage)
                grads = model.backward(aug.image, grad_heat, grad_coords)
                for name in names:
                    acc[name] += grads[name]
                losses += values
            grads = {name: acc[name] / tc.batch_size for name in names}
            updated, state = adam_step({name: params[name] for name in names}, grads, state, tc)
            model.set_parameters(updated)

            sim, rep, l3d, total = losses / tc.batch_size
            log.append(TrainLogRow(iteration, stage, float(sim), float(rep), float(l3d), float(total)))
            done[stage] += 1
            if tc.log_every and done[stage] % tc.log_every == 0:
                logger.info(
                    "stage %d iter %d/%d: L_sim=%.4f L_rep=%.4f L_3D=%.4f L_all=%.4f",
                    stage, done[stage], total_iters, sim, rep, l3d, total,
                )

    return TrainResult(log=log, progress=TrainingProgress(state, done[1], done[2]))


def write_loss_csv(path: Union[str, Path], log: Sequence[TrainLogRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage", "sim", "rep", "l3d", "all"])
        for row in log:
            writer.writerow(
                [row.iteration, row.stage] + [f"{v:.17g}" for v in (row.sim, row.rep, row.l3d, row.all)]
            )
