"""Central finite-difference checks of the analytic loss and network gradients."""

from dataclasses import dataclass, replace
import logging
from typing import Callable, Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, ScenePose, project_points
from .losses import loss_3d, loss_rep, loss_sim
from .regressor import Regressor, RegressorConfig


logger = logging.getLogger(__name__)

LOSS_STEP = 1e-5
LOSS_FLOOR = 1e-6
NETWORK_STEP = 1e-5
NETWORK_FLOOR = 1e-4
LOSS_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3

MINI_CONFIG = RegressorConfig(input_height=8, input_width=8, encoder_channels=(2,), zero_init_heads=False)


@dataclass
class GradCheckResult:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "checked": self.checked,
            "skipped": self.skipped,
            "passed": self.passed,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = LOSS_FLOOR) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = LOSS_STEP) -> np.ndarray:
    """Central differences of a scalar function, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + step
        plus = f(x)
        x[idx] = original - step
        minus = f(x)
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def check_loss_sim(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.05, 1.0, size=(16, 16))
    target = rng.uniform(0.0, 1.0, size=(16, 16)) * (rng.uniform(size=(16, 16)) < 0.3)
    _, analytic = loss_sim(pred, target)
    numeric = numeric_gradient(lambda p: loss_sim(p, target)[0], pred)
    return GradCheckResult("loss_sim", seed, relative_error(analytic, numeric), LOSS_TOLERANCE, pred.size)


def check_loss_rep(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(100.0, 110.0, 32.0, 24.0, 64, 48)
    pose = ScenePose.from_matrix(Rotation.from_rotvec(rng.normal(size=3) * 0.5).as_matrix(), rng.normal(size=3))
    cam = np.column_stack([rng.uniform(-2, 2, size=20), rng.uniform(-2, 2, size=20), rng.uniform(3, 8, size=20)])
    world = (cam - pose.translation_vector) @ pose.rotation_matrix
    pixels, _ = project_points(k, pose, world)
    pixels = pixels + rng.normal(0, 5.0, size=pixels.shape)
    coords = world + rng.normal(0, 0.2, size=world.shape)
    _, analytic = loss_rep(coords, pixels, k, pose)
    numeric = numeric_gradient(lambda X: loss_rep(X, pixels, k, pose)[0], coords)
    return GradCheckResult("loss_rep", seed, relative_error(analytic, numeric), LOSS_TOLERANCE, coords.size)


def check_loss_3d(seed: int) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(20, 3))
    gt = rng.normal(size=(20, 3))
    _, analytic = loss_3d(pred, gt)
    numeric = numeric_gradient(lambda p: loss_3d(p, gt)[0], pred)
    return GradCheckResult("loss_3d", seed, relative_error(analytic, numeric), LOSS_TOLERANCE, pred.size)


def check_regressor(seed: int, config: RegressorConfig = MINI_CONFIG) -> GradCheckResult:
    """Backward pass against differences of L = <gh, heatmap> + <gc, coords>.

    Entries whose perturbation flips a ReLU are skipped.
    """
    rng = np.random.default_rng(seed)
    config = replace(config, seed=seed)
    model = Regressor(config)
    H, W = config.input_height, config.input_width
    image = rng.uniform(0.0, 1.0, size=(H, W, 3))
    grad_heat = rng.normal(size=(H, W))
    grad_coords = rng.normal(size=(H, W, 3))

    def objective() -> float:
        out = model.forward(image)
        return float(np.sum(grad_heat * out.heatmap.values) + np.sum(grad_coords * out.coords.values))

    objective()
    base_pattern = model.relu_pattern()
    analytic = model.backward(image, grad_heat, grad_coords)

    worst = 0.0
    checked = skipped = 0
    for name in model.parameter_names:
        original = model.parameters[name]
        for idx in np.ndindex(original.shape):
            values = original.copy()
            values[idx] += NETWORK_STEP
            model.set_parameters({name: values})
            plus = objective()
            kink = not np.array_equal(model.relu_pattern(), base_pattern)
            values[idx] = original[idx] - NETWORK_STEP
            model.set_parameters({name: values})
            minus = objective()
            kink |= not np.array_equal(model.relu_pattern(), base_pattern)
            if kink:
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * NETWORK_STEP)
            worst = max(worst, relative_error(analytic[name][idx], numeric, NETWORK_FLOOR))
            checked += 1
        model.set_parameters({name: original})
    return GradCheckResult("regressor", seed, worst, NETWORK_TOLERANCE, checked, skipped)


LOSS_CHECKS = (check_loss_sim, check_loss_rep, check_loss_3d)


def run_gradient_suite(seeds: Iterable[int] = range(20), include_network: bool = True) -> list[GradCheckResult]:
    results = []
    for seed in seeds:
        checks = LOSS_CHECKS + ((check_regressor,) if include_network else ())
        for check in checks:
            result = check(seed)
            level = logging.DEBUG if result.passed else logging.WARNING
            logger.log(level, "%s seed=%d max_rel_error=%.3g", result.name, seed, result.max_rel_error)
            results.append(result)
    return results
