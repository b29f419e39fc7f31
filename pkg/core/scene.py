"""Sparse scene models (SCENE1 text format) and reference heatmaps."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .errors import ParseError, UnknownImage, ValidationError
from .geometry import CameraIntrinsics, ScenePose, project_points
from .netpbm import read_pgm, to_bytes, write_pgm


MAGIC = "SCENE1"
SECTIONS = ("POINTS", "IMAGES", "VISIBILITY")


@dataclass(frozen=True)
class SceneFrame:
    """Ground-truth pose and intrinsics of one image."""
    pose: ScenePose
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class Observation:
    """A point seen in an image at an observed pixel."""
    point_id: int
    pixel: tuple[float, float]


@dataclass(frozen=True, eq=False)
class Heatmap:
    """H x W confidence grid with values in [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"Heatmap must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0 or values.max(initial=0.0) > 1:
            raise ValidationError("Heatmap values must be finite and within [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "Heatmap":
        return cls(np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class SceneModel:
    """3D points, per-image ground truth and visibility lists.

    Immutable after construction; all invariants are checked by validate().
    """
    points: dict[int, np.ndarray]
    frames: dict[int, SceneFrame]
    visibility: dict[int, list[Observation]] = field(default_factory=dict)

    def frame(self, image_id: int) -> SceneFrame:
        try:
            return self.frames[image_id]
        except KeyError:
            raise UnknownImage(image_id)

    def observations(self, image_id: int) -> list[Observation]:
        self.frame(image_id)
        return self.visibility.get(image_id, [])

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.frames)

    @property
    def diameter(self) -> float:
        """Largest extent of the point cloud's bounding box diagonal."""
        if not self.points:
            return 0.0
        cloud = np.array(list(self.points.values()))
        return float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))

    def validate(self) -> None:
        for image_id, observations in self.visibility.items():
            if image_id not in self.frames:
                raise ValidationError(f"Visibility references unknown image {image_id}")
            frame = self.frames[image_id]
            for obs in observations:
                if obs.point_id not in self.points:
                    raise ValidationError(
                        f"Image {image_id} references unknown point {obs.point_id}"
                    )
                u, v = obs.pixel
                if not frame.intrinsics.contains(u, v):
                    raise ValidationError(
                        f"Observation of point {obs.point_id} in image {image_id} "
                        f"at ({u}, {v}) is outside the image"
                    )
                _, depth = project_points(frame.intrinsics, frame.pose, self.points[obs.point_id])
                if not depth[0] > 0:
                    raise ValidationError(
                        f"Point {obs.point_id} has non-positive depth in image {image_id}"
                    )


def _strip_comment(line: str) -> str:
    """Remove comment from line."""
    idx = line.find("#")
    if idx >= 0:
        return line[:idx]
    return line


def _content_lines(text: str) -> Iterator[tuple[int, str, str]]:
    for line_no, line in enumerate(text.split("\n"), 1):
        stripped = _strip_comment(line).strip()
        if stripped:
            yield line_no, stripped, line.strip()


def _numbers(fields: list[str], kinds: str, line_no: int, source: str) -> list:
    if len(fields) != len(kinds):
        raise ParseError(
            f"Expected {len(kinds)} fields, got {len(fields)}",
            source_line_no=line_no,
            source_text=source,
        )
    values = []
    for text, kind in zip(fields, kinds):
        try:
            values.append(int(text) if kind == "i" else float(text))
        except ValueError:
            raise ParseError(
                f"Invalid {'integer' if kind == 'i' else 'number'}: {text}",
                source_line_no=line_no,
                source_text=source,
            )
    if any(not np.isfinite(v) for v in values):
        raise ParseError("Non-finite value", source_line_no=line_no, source_text=source)
    return values


def parse_scene_model(text: str) -> SceneModel:
    """Parse SCENE1 text into a validated SceneModel."""
    lines = list(_content_lines(text))
    if not lines or lines[0][1] != MAGIC:
        line_no = lines[0][0] if lines else 1
        raise ParseError(f"Missing {MAGIC} header", source_line_no=line_no)

    points: dict[int, np.ndarray] = {}
    frames: dict[int, SceneFrame] = {}
    visibility: dict[int, list[Observation]] = {}

    pos = 1
    for section in SECTIONS:
        if pos >= len(lines):
            raise ParseError(f"Missing {section} section", source_line_no=lines[-1][0])
        line_no, stripped, source = lines[pos]
        header = stripped.split()
        if header[0] != section or len(header) != 2:
            raise ParseError(
                f"Expected '{section} <count>'", source_line_no=line_no, source_text=source
            )
        (count,) = _numbers(header[1:], "i", line_no, source)
        if count < 0:
            raise ParseError("Negative count", source_line_no=line_no, source_text=source)
        body = lines[pos + 1 : pos + 1 + count]
        if len(body) < count:
            raise ParseError(
                f"{section} declares {count} records, found {len(body)}",
                source_line_no=line_no,
                source_text=source,
            )
        for rec_line_no, rec, rec_source in body:
            fields = rec.split()
            if section == "POINTS":
                pid, x, y, z = _numbers(fields, "ifff", rec_line_no, rec_source)
                if pid in points:
                    raise ParseError(
                        f"Duplicate point id {pid}", source_line_no=rec_line_no, source_text=rec_source
                    )
                points[pid] = np.array([x, y, z])
            elif section == "IMAGES":
                values = _numbers(fields, "ifffffffffffii", rec_line_no, rec_source)
                image_id = values[0]
                if image_id in frames:
                    raise ParseError(
                        f"Duplicate image id {image_id}",
                        source_line_no=rec_line_no,
                        source_text=rec_source,
                    )
                try:
                    pose = ScenePose.from_quaternion(values[1:5], values[5:8])
                    intrinsics = CameraIntrinsics(*values[8:12], width=values[12], height=values[13])
                except ValueError as e:
                    raise ParseError(str(e), source_line_no=rec_line_no, source_text=rec_source)
                frames[image_id] = SceneFrame(pose, intrinsics)
            else:
                image_id, point_id, u, v = _numbers(fields, "iiff", rec_line_no, rec_source)
                visibility.setdefault(image_id, []).append(Observation(point_id, (u, v)))
        pos += 1 + count

    if pos < len(lines):
        line_no, _, source = lines[pos]
        raise ParseError("Unexpected content after VISIBILITY", source_line_no=line_no, source_text=source)

    for image_id in visibility:
        visibility[image_id].sort(key=lambda obs: obs.point_id)
    model = SceneModel(points=points, frames=frames, visibility=visibility)
    model.validate()
    return model


def load_scene_model(path: Union[str, Path]) -> SceneModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"Cannot read scene file {path}: {e}")
    except UnicodeDecodeError as e:
        raise ParseError(f"Scene file {path} is not UTF-8 text: {e}")
    return parse_scene_model(text)


def format_scene_model(model: SceneModel) -> str:
    def g(value: float) -> str:
        return f"{value:.17g}"

    out = [MAGIC, f"POINTS {len(model.points)}"]
    for pid in sorted(model.points):
        out.append(" ".join([str(pid)] + [g(c) for c in model.points[pid]]))
    out.append(f"IMAGES {len(model.frames)}")
    for image_id in model.image_ids:
        frame = model.frames[image_id]
        k = frame.intrinsics
        values = list(frame.pose.rotation) + list(frame.pose.translation) + [k.fx, k.fy, k.cx, k.cy]
        out.append(" ".join([str(image_id)] + [g(v) for v in values] + [str(k.width), str(k.height)]))
    records = [
        (image_id, obs)
        for image_id in sorted(model.visibility)
        for obs in model.visibility[image_id]
    ]
    out.append(f"VISIBILITY {len(records)}")
    for image_id, obs in records:
        out.append(f"{image_id} {obs.point_id} {g(obs.pixel[0])} {g(obs.pixel[1])}")
    return "\n".join(out) + "\n"


def save_scene_model(model: SceneModel, path: Union[str, Path]) -> None:
    Path(path).write_text(format_scene_model(model), encoding="utf-8")


def rounded_cells(pixels: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-integer (row, col) cells of pixels, with an in-bounds mask."""
    cols = np.floor(pixels[:, 0] + 0.5)
    rows = np.floor(pixels[:, 1] + 0.5)
    finite = np.isfinite(cols) & np.isfinite(rows)
    inside = finite & (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    rows = np.where(inside, rows, 0).astype(np.int64)
    cols = np.where(inside, cols, 0).astype(np.int64)
    return rows, cols, inside


def reference_heatmap(
    model: SceneModel, image_id: int, point_ids: Optional[set[int]] = None
) -> Heatmap:
    """Target heatmap: 1.0 at the rounded GT projection of every visible point.

    point_ids optionally restricts the points marked (e.g. reliable points only).
    """
    frame = model.frame(image_id)
    k = frame.intrinsics
    values = np.zeros((k.height, k.width))
    ids = [obs.point_id for obs in model.observations(image_id)]
    if point_ids is not None:
        ids = [pid for pid in ids if pid in point_ids]
    if ids:
        world = np.array([model.points[pid] for pid in ids])
        pixels, _ = project_points(k, frame.pose, world)
        rows, cols, inside = rounded_cells(pixels, k.width, k.height)
        values[rows[inside], cols[inside]] = 1.0
    return Heatmap(values)


def visible_observations(model: SceneModel, image_id: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(observed pixel, world point) pairs in ascending point id order."""
    return [
        (np.array(obs.pixel), model.points[obs.point_id].copy())
        for obs in sorted(model.observations(image_id), key=lambda o: o.point_id)
    ]


def save_heatmap_pgm(heatmap: Heatmap, path: Union[str, Path]) -> None:
    """P5 export with value round(255 * confidence)."""
    write_pgm(path, to_bytes(heatmap.values))


def load_heatmap_pgm(path: Union[str, Path]) -> Heatmap:
    return Heatmap(read_pgm(path).astype(np.float64) / 255.0)
