"""Synthetic scenes with discriminative and repetitive regions.

Stream order of the seeded generator (numpy PCG64 via default_rng):
point coordinates for all points, then per camera (in image id order)
the 2D observation noise for every point, drawn whether or not the point
ends up visible.
"""

import csv
from dataclasses import dataclass, field
import enum
import hashlib
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidConfig, InvalidSpec, ParseError
from .geometry import CameraIntrinsics, ScenePose, backproject, project_points
from .keypoints import CoordMap, Correspondence
from .netpbm import read_pgm, write_pgm
from .scene import Heatmap, Observation, SceneFrame, SceneModel, rounded_cells


logger = logging.getLogger(__name__)

BACKGROUND_COLOR = (26 / 255, 26 / 255, 26 / 255)
# Darkest channel value of the discriminative colour ramp
COLOR_FLOOR = 0.1


class RegionClass(enum.IntEnum):
    BACKGROUND = 0
    DISCRIMINATIVE = 1
    REPETITIVE = 2


# Label PGM gray levels
LABEL_GRAY = {
    RegionClass.BACKGROUND: 0,
    RegionClass.DISCRIMINATIVE: 255,
    RegionClass.REPETITIVE: 128,
}


@dataclass(frozen=True)
class SynthSceneSpec:
    n_discriminative: int = 204
    n_repetitive: int = 96
    group_size: int = 8
    box_extent: float = 4.0  # side of the cube centred on the origin
    n_cameras: int = 20
    ring_radius: float = 8.0
    camera_height: float = 1.5
    width: int = 64
    height: int = 64
    focal: float = 96.0
    splat: int = 3
    pixel_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_discriminative < 0 or self.n_repetitive < 0:
            raise InvalidSpec("Point counts must be non-negative")
        if self.n_discriminative + self.n_repetitive < 4:
            raise InvalidSpec("A scene needs at least 4 points")
        if self.group_size < 1:
            raise InvalidSpec(f"group_size must be >= 1, got {self.group_size}")
        if not self.box_extent > 0:
            raise InvalidSpec(f"box_extent must be positive, got {self.box_extent}")
        if not self.ring_radius > self.box_extent * math.sqrt(3) / 2:
            raise InvalidSpec(
                f"ring_radius {self.ring_radius} must exceed half the box diagonal "
                f"({self.box_extent * math.sqrt(3) / 2:.3f})"
            )
        if self.n_cameras < 1:
            raise InvalidSpec(f"n_cameras must be >= 1, got {self.n_cameras}")
        if self.width < 1 or self.height < 1 or not self.focal > 0:
            raise InvalidSpec("Image size and focal length must be positive")
        if self.splat < 1:
            raise InvalidSpec(f"splat must be >= 1, got {self.splat}")
        if self.pixel_noise < 0:
            raise InvalidSpec(f"pixel_noise must be >= 0, got {self.pixel_noise}")

    @property
    def n_points(self) -> int:
        return self.n_discriminative + self.n_repetitive

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=(self.width - 1) / 2,
            cy=(self.height - 1) / 2,
            width=self.width,
            height=self.height,
        )


@dataclass(frozen=True, eq=False)
class RegionLabelMap:
    """H x W region classes of a rendered frame."""
    labels: np.ndarray

    def to_gray(self) -> np.ndarray:
        gray = np.zeros(self.labels.shape, dtype=np.uint8)
        for region, level in LABEL_GRAY.items():
            gray[self.labels == region] = level
        return gray

    @classmethod
    def from_gray(cls, gray: np.ndarray) -> "RegionLabelMap":
        labels = np.zeros(gray.shape, dtype=np.uint8)
        known = np.zeros(gray.shape, dtype=bool)
        for region, level in LABEL_GRAY.items():
            labels[gray == level] = region
            known |= gray == level
        if not known.all():
            raise ParseError("Label map contains gray levels outside {0, 128, 255}")
        return cls(labels)

    def mask(self, region: RegionClass) -> np.ndarray:
        return self.labels == region


def save_label_pgm(labels: RegionLabelMap, path: Union[str, Path]) -> None:
    write_pgm(path, labels.to_gray())


def load_label_pgm(path: Union[str, Path]) -> RegionLabelMap:
    return RegionLabelMap.from_gray(read_pgm(path))


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    model: SceneModel
    colors: dict[int, tuple[float, float, float]]
    regions: dict[int, RegionClass]
    spec: SynthSceneSpec = field(default_factory=SynthSceneSpec)

    def point_ids(self, region: RegionClass) -> set[int]:
        return {pid for pid, r in self.regions.items() if r == region}

    def reliable_model(self) -> SceneModel:
        """Same scene with visibility restricted to discriminative points."""
        keep = self.point_ids(RegionClass.DISCRIMINATIVE)
        visibility = {
            image_id: [obs for obs in observations if obs.point_id in keep]
            for image_id, observations in self.model.visibility.items()
        }
        return SceneModel(points=self.model.points, frames=self.model.frames, visibility=visibility)

    def render(self, image_id: int) -> tuple[np.ndarray, RegionLabelMap]:
        return render_image(self.model, image_id, self.colors, self.spec.splat, self.regions)


def _hash_unit(*parts) -> np.ndarray:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint8).astype(np.float64) / 255.0


def _quantize(rgb: Sequence[float]) -> tuple[float, float, float]:
    return tuple(math.floor(c * 255 + 0.5) / 255 for c in rgb)


def _discriminative_color(
    seed: int, point_id: int, position: np.ndarray, extent: float, attempt: int
) -> tuple[float, float, float]:
    """Colour ramp over the box, one channel per axis; collisions get a hashed nudge."""
    rgb = COLOR_FLOOR + (1.0 - COLOR_FLOOR) * (position / extent + 0.5)
    if attempt:
        rgb = rgb + (np.round(_hash_unit("disc", seed, point_id, attempt)[:3] * 4) - 2) / 255
    return _quantize(np.clip(rgb, 0.0, 1.0))


def _repetitive_color(seed: int, group: int) -> tuple[float, float, float]:
    level = 0.35 + 0.5 * _hash_unit("rep", seed, group)[0]
    return _quantize((level, level, level))


def look_at(center: np.ndarray, target: np.ndarray) -> ScenePose:
    """Camera at center looking at target, image y pointing down along -Z."""
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return ScenePose.from_matrix(R, -R @ center)


def generate_scene(spec: SynthSceneSpec) -> SyntheticScene:
    """Random points in a box observed by cameras on a ring around it."""
    rng = np.random.default_rng(spec.seed)
    half = spec.box_extent / 2
    cloud = rng.uniform(-half, half, size=(spec.n_points, 3))

    points = {pid: cloud[pid].copy() for pid in range(spec.n_points)}
    regions: dict[int, RegionClass] = {}
    colors: dict[int, tuple[float, float, float]] = {}
    used = {BACKGROUND_COLOR}
    for pid in range(spec.n_discriminative):
        attempt = 0
        color = _discriminative_color(spec.seed, pid, cloud[pid], spec.box_extent, attempt)
        while color in used:
            attempt += 1
            color = _discriminative_color(spec.seed, pid, cloud[pid], spec.box_extent, attempt)
        used.add(color)
        colors[pid] = color
        regions[pid] = RegionClass.DISCRIMINATIVE
    for pid in range(spec.n_discriminative, spec.n_points):
        group = (pid - spec.n_discriminative) // spec.group_size
        colors[pid] = _repetitive_color(spec.seed, group)
        regions[pid] = RegionClass.REPETITIVE

    k = spec.intrinsics()
    frames: dict[int, SceneFrame] = {}
    visibility: dict[int, list[Observation]] = {}
    for image_id in range(spec.n_cameras):
        angle = 2 * math.pi * image_id / spec.n_cameras
        center = np.array(
            [spec.ring_radius * math.cos(angle), spec.ring_radius * math.sin(angle), spec.camera_height]
        )
        pose = look_at(center, np.zeros(3))
        frames[image_id] = SceneFrame(pose, k)

        exact, depth = project_points(k, pose, cloud)
        noise = rng.normal(0.0, spec.pixel_noise, size=(spec.n_points, 2))
        observed = exact + noise
        in_view = (
            (depth > 0)
            & (exact[:, 0] >= 0) & (exact[:, 0] <= k.width - 1)
            & (exact[:, 1] >= 0) & (exact[:, 1] <= k.height - 1)
            & (observed[:, 0] >= 0) & (observed[:, 0] < k.width)
            & (observed[:, 1] >= 0) & (observed[:, 1] < k.height)
        )
        visibility[image_id] = [
            Observation(int(pid), (float(observed[pid, 0]), float(observed[pid, 1])))
            for pid in np.flatnonzero(in_view)
        ]

    model = SceneModel(points=points, frames=frames, visibility=visibility)
    model.validate()
    logger.debug(
        "generated scene seed=%d: %d points, %d cameras, %d observations",
        spec.seed, spec.n_points, spec.n_cameras, sum(len(v) for v in visibility.values()),
    )
    return SyntheticScene(model=model, colors=colors, regions=regions, spec=spec)


def _splat_offsets(splat: int) -> np.ndarray:
    lo = -(splat // 2)
    r = np.arange(lo, lo + splat)
    dr, dc = np.meshgrid(r, r, indexing="ij")
    return np.stack([dr.ravel(), dc.ravel()], axis=1)


def _rasterize(model: SceneModel, image_id: int, splat: int):
    """Z-buffered splats: (winning point id or -1, depth) per cell."""
    frame = model.frame(image_id)
    k = frame.intrinsics
    owner = np.full((k.height, k.width), -1, dtype=np.int64)
    zbuf = np.full((k.height, k.width), np.inf)
    ids = np.array([obs.point_id for obs in model.observations(image_id)], dtype=np.int64)
    if ids.size == 0:
        return owner, zbuf
    world = np.array([model.points[int(pid)] for pid in ids])
    pixels, depth = project_points(k, frame.pose, world)
    rows, cols, inside = rounded_cells(pixels, k.width, k.height)
    keep = inside & (depth > 0)
    ids, rows, cols, depth = ids[keep], rows[keep], cols[keep], depth[keep]

    offsets = _splat_offsets(splat)
    cell_r = (rows[:, None] + offsets[None, :, 0]).ravel()
    cell_c = (cols[:, None] + offsets[None, :, 1]).ravel()
    cell_id = np.repeat(ids, len(offsets))
    cell_z = np.repeat(depth, len(offsets))
    on_grid = (cell_r >= 0) & (cell_r < k.height) & (cell_c >= 0) & (cell_c < k.width)
    cell_r, cell_c, cell_id, cell_z = cell_r[on_grid], cell_c[on_grid], cell_id[on_grid], cell_z[on_grid]

    flat = cell_r * k.width + cell_c
    order = np.lexsort((cell_id, cell_z, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    owner.flat[flat[winners]] = cell_id[winners]
    zbuf.flat[flat[winners]] = cell_z[winners]
    return owner, zbuf


def render_image(
    model: SceneModel,
    image_id: int,
    colors: dict[int, tuple[float, float, float]],
    splat: int,
    regions: Optional[dict[int, RegionClass]] = None,
    background: tuple[float, float, float] = BACKGROUND_COLOR,
) -> tuple[np.ndarray, RegionLabelMap]:
    """(H, W, 3) float image in [0, 1] and its region labels."""
    if splat < 1:
        raise InvalidConfig(f"splat must be >= 1, got {splat}")
    owner, _ = _rasterize(model, image_id, splat)
    image = np.empty(owner.shape + (3,))
    image[:] = background
    labels = np.full(owner.shape, RegionClass.BACKGROUND, dtype=np.uint8)
    covered = owner >= 0
    if covered.any():
        ids = owner[covered]
        palette = np.array([colors[int(pid)] for pid in ids])
        image[covered] = palette
        if regions is not None:
            labels[covered] = [regions[int(pid)] for pid in ids]
    return image, RegionLabelMap(labels)


def ground_truth_coords(scene: SyntheticScene, image_id: int) -> tuple[CoordMap, np.ndarray]:
    """Oracle coordinate map and its validity mask.

    Each covered cell holds the backprojection of its centre at the depth of
    the point splatted there; uncovered cells are zero and invalid.
    """
    model = scene.model
    frame = model.frame(image_id)
    k = frame.intrinsics
    owner, zbuf = _rasterize(model, image_id, scene.spec.splat)
    valid = owner >= 0
    coords = np.zeros((k.height, k.width, 3))
    if valid.any():
        rows, cols = np.nonzero(valid)
        pixels = np.stack([cols, rows], axis=1).astype(np.float64)
        coords[rows, cols] = backproject(k, frame.pose, pixels, zbuf[rows, cols])
    return CoordMap(coords), valid


def exact_correspondences(model: SceneModel, image_id: int) -> list[Correspondence]:
    """Exact projections of every visible point, in point id order."""
    frame = model.frame(image_id)
    observations = sorted(model.observations(image_id), key=lambda o: o.point_id)
    if not observations:
        return []
    world = np.array([model.points[obs.point_id] for obs in observations])
    pixels, _ = project_points(frame.intrinsics, frame.pose, world)
    return [
        Correspondence(pixel=(float(p[0]), float(p[1])), world=(float(X[0]), float(X[1]), float(X[2])))
        for p, X in zip(pixels, world)
    ]


def corrupt_correspondences(
    exact: Sequence[Correspondence],
    noise_px: float,
    outlier_fraction: float,
    seed: int,
    width: int,
    height: int,
) -> tuple[list[Correspondence], np.ndarray]:
    """Gaussian pixel noise plus a seeded subset of uniform-random outlier pixels.

    Returns the corrupted list (order preserved) and the planted-outlier flags.
    """
    if noise_px < 0:
        raise InvalidConfig(f"noise_px must be >= 0, got {noise_px}")
    if not 0.0 <= outlier_fraction <= 1.0:
        raise InvalidConfig(f"outlier_fraction must be within [0, 1], got {outlier_fraction}")
    n = len(exact)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_px, size=(n, 2))
    n_out = int(math.floor(outlier_fraction * n))
    outliers = np.zeros(n, dtype=bool)
    outliers[rng.choice(n, n_out, replace=False)] = True
    random_pixels = rng.uniform((0.0, 0.0), (float(width), float(height)), size=(n, 2))

    result = []
    for i, c in enumerate(exact):
        if outliers[i]:
            pixel = (float(random_pixels[i, 0]), float(random_pixels[i, 1]))
        else:
            pixel = (c.pixel[0] + float(noise[i, 0]), c.pixel[1] + float(noise[i, 1]))
        result.append(Correspondence(pixel=pixel, world=c.world, confidence=c.confidence))
    return result, outliers


@dataclass(frozen=True, eq=False)
class PlantedFrame:
    """Frame whose heatmap confidence is anti-correlated with coordinate error."""
    image_id: int
    intrinsics: CameraIntrinsics
    pose: ScenePose
    heatmap: Heatmap
    coords: CoordMap
    coord_error: np.ndarray  # H x W distance between planted and true coordinates


def planted_confidence_frames(
    n_frames: int = 10,
    width: int = 160,
    height: int = 120,
    focal: float = 100.0,
    spacing: int = 5,
    hi_range: tuple[float, float] = (0.7, 1.0),
    lo_score: float = 0.4,
    noise_scale: float = 0.5,
    outlier_scale: float = 0.5,
    seed: int = 0,
) -> list[PlantedFrame]:
    """Isolated confidence peaks on a grid; half confident, half in the low band.

    A peak with confidence c carries 3D noise of scale noise_scale * (1 - c)
    and is replaced by a random point with probability outlier_scale * (1 - c).
    """
    if spacing < 2 or n_frames < 1:
        raise InvalidConfig("spacing must be >= 2 and n_frames >= 1")
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)
    offset = spacing // 2
    grid_r, grid_c = np.meshgrid(
        np.arange(offset, height, spacing), np.arange(offset, width, spacing), indexing="ij"
    )
    rows, cols = grid_r.ravel(), grid_c.ravel()
    n = rows.size

    frames = []
    for image_id in range(n_frames):
        azimuth = rng.uniform(0, 2 * math.pi)
        elevation = rng.uniform(-0.3, 0.6)
        center = 8.0 * np.array(
            [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
        )
        pose = look_at(center, np.zeros(3))

        depth = rng.uniform(6.0, 10.0, size=n)
        pixels = np.stack([cols, rows], axis=1).astype(np.float64)
        true_world = backproject(k, pose, pixels, depth)

        confident = rng.permutation(n) < n // 2
        conf = np.where(
            confident,
            rng.uniform(hi_range[0], hi_range[1], size=n),
            rng.uniform(lo_score - 0.05, lo_score + 0.05, size=n),
        )
        conf = np.clip(conf, 0.0, 1.0)
        noisy = true_world + rng.normal(size=(n, 3)) * (noise_scale * (1 - conf))[:, None]
        replaced = rng.uniform(size=n) < outlier_scale * (1 - conf)
        noisy[replaced] = rng.uniform(-4.0, 4.0, size=(int(replaced.sum()), 3))

        heat = np.zeros((height, width))
        heat[rows, cols] = conf
        coords = np.zeros((height, width, 3))
        coords[rows, cols] = noisy
        error = np.zeros((height, width))
        error[rows, cols] = np.linalg.norm(noisy - true_world, axis=1)
        frames.append(PlantedFrame(image_id, k, pose, Heatmap(heat), CoordMap(coords), error))
    return frames


# Palette file

def write_palette(path: Union[str, Path], scene: SyntheticScene) -> None:
    """palette.csv: point_id,region,r,g,b with 8-bit channels."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["point_id", "region", "r", "g", "b"])
        for pid in sorted(scene.colors):
            rgb = [int(math.floor(c * 255 + 0.5)) for c in scene.colors[pid]]
            writer.writerow([pid, scene.regions[pid].name.lower(), *rgb])


def read_palette(path: Union[str, Path]) -> tuple[dict[int, tuple[float, float, float]], dict[int, RegionClass]]:
    colors: dict[int, tuple[float, float, float]] = {}
    regions: dict[int, RegionClass] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for line_no, row in enumerate(csv.DictReader(fh), 2):
                try:
                    pid = int(row["point_id"])
                    regions[pid] = RegionClass[row["region"].upper()]
                    colors[pid] = tuple(int(row[c]) / 255 for c in "rgb")
                except (KeyError, ValueError, TypeError, AttributeError):
                    raise ParseError("Malformed palette row", source_line_no=line_no, source_text=str(row))
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"Cannot read palette {path}: {e}")
    return colors, regions


def scene_from_files(model: SceneModel, palette_path: Union[str, Path], splat: int) -> SyntheticScene:
    """Rebuild a SyntheticScene from a SCENE1 model and its palette file."""
    colors, regions = read_palette(palette_path)
    missing = set(model.points) - set(colors)
    if missing:
        raise ParseError(f"Palette lacks {len(missing)} scene points")
    if not model.frames:
        raise ParseError("Scene model has no images")
    first = model.frame(model.image_ids[0]).intrinsics
    spec = SynthSceneSpec(
        n_discriminative=sum(r == RegionClass.DISCRIMINATIVE for r in regions.values()),
        n_repetitive=sum(r == RegionClass.REPETITIVE for r in regions.values()),
        n_cameras=len(model.frames),
        ring_radius=max(8.0, model.diameter),
        width=first.width,
        height=first.height,
        focal=first.fx,
        splat=splat,
    )
    return SyntheticScene(model=model, colors=colors, regions=regions, spec=spec)
