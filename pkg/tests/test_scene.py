"""Tests for SCENE1 parsing and reference heatmaps."""

import numpy as np
import pytest

from core.errors import ParseError, UnknownImage, ValidationError
from core.geometry import project_points
from core.scene import (
    Heatmap,
    format_scene_model,
    load_heatmap_pgm,
    load_scene_model,
    parse_scene_model,
    reference_heatmap,
    rounded_cells,
    save_heatmap_pgm,
    save_scene_model,
    visible_observations,
)


MINIMAL = """SCENE1
# one point seen by one identity camera
POINTS 1
0 0 0 5
IMAGES 1
0 1 0 0 0 0 0 0 100 100 50 50 100 100
VISIBILITY 1
0 0 50 50
"""


def scene_text(points="0 0 0 5", visibility="0 0 50 50", images="0 1 0 0 0 0 0 0 100 100 50 50 100 100"):
    point_lines = [p for p in points.split("\n") if p]
    vis_lines = [v for v in visibility.split("\n") if v]
    image_lines = [i for i in images.split("\n") if i]
    return "\n".join(
        ["SCENE1", f"POINTS {len(point_lines)}", *point_lines, f"IMAGES {len(image_lines)}", *image_lines,
         f"VISIBILITY {len(vis_lines)}", *vis_lines]
    ) + "\n"


class TestParse:
    """SCENE1 text parsing."""

    def test_minimal(self):
        """One point, one frame, one observation."""
        model = parse_scene_model(MINIMAL)
        assert len(model.points) == 1
        assert model.image_ids == [0]
        assert model.observations(0)[0].pixel == (50.0, 50.0)

    def test_comments_and_blank_lines(self):
        """Comments and blank lines are ignored."""
        text = MINIMAL.replace("POINTS 1\n", "\nPOINTS 1  # count\n\n")
        assert len(parse_scene_model(text).points) == 1

    def test_missing_header(self):
        """First content line must be SCENE1."""
        with pytest.raises(ParseError) as exc:
            parse_scene_model(MINIMAL.replace("SCENE1", "SCENE2"))
        assert exc.value.source_line_no == 1

    def test_bad_number(self):
        """Non-numeric coordinates report their line."""
        with pytest.raises(ParseError) as exc:
            parse_scene_model(MINIMAL.replace("0 0 0 5", "0 0 x 5"))
        assert exc.value.source_line_no == 4

    def test_short_section(self):
        """Declared count larger than the records present."""
        with pytest.raises(ParseError):
            parse_scene_model(MINIMAL.replace("VISIBILITY 1", "VISIBILITY 2"))

    def test_trailing_content(self):
        """Nothing may follow the visibility records."""
        with pytest.raises(ParseError):
            parse_scene_model(MINIMAL + "0 0 50 50\n")

    def test_duplicate_point(self):
        """Point ids are unique."""
        with pytest.raises(ParseError):
            parse_scene_model(scene_text(points="0 0 0 5\n0 1 0 5"))

    def test_dangling_point(self):
        """Visibility of an unknown point is a validation error."""
        with pytest.raises(ValidationError):
            parse_scene_model(scene_text(visibility="0 7 50 50"))

    def test_pixel_out_of_bounds(self):
        """Observed pixels must be inside the frame."""
        with pytest.raises(ValidationError):
            parse_scene_model(scene_text(visibility="0 0 150 50"))

    def test_negative_depth(self):
        """Visible points must be in front of the camera."""
        with pytest.raises(ValidationError):
            parse_scene_model(scene_text(points="0 0 0 -5"))

    def test_invalid_intrinsics(self):
        """Bad intrinsics surface as a parse error on their line."""
        with pytest.raises(ParseError) as exc:
            parse_scene_model(scene_text(images="0 1 0 0 0 0 0 0 0 100 50 50 100 100"))
        assert exc.value.source_line_no == 5

    def test_missing_file(self, tmp_path):
        """Unreadable files are a parse error."""
        with pytest.raises(ParseError):
            load_scene_model(tmp_path / "absent.scene1")

    def test_not_utf8(self, tmp_path):
        """Undecodable bytes are a parse error."""
        path = tmp_path / "binary.scene1"
        path.write_bytes(b"SCENE1\nPOINTS 0\n\xff\xfe\n")
        with pytest.raises(ParseError, match="not UTF-8"):
            load_scene_model(path)


class TestRoundTrip:
    """save then load."""

    def test_synthetic_scene(self, scene, tmp_path):
        """Saved and reloaded model is field-exact."""
        path = tmp_path / "scene.scene1"
        save_scene_model(scene.model, path)
        loaded = load_scene_model(path)
        assert loaded.image_ids == scene.model.image_ids
        for pid, point in scene.model.points.items():
            assert np.array_equal(loaded.points[pid], point)
        for image_id in scene.model.image_ids:
            assert loaded.frame(image_id) == scene.model.frame(image_id)
            assert loaded.observations(image_id) == scene.model.observations(image_id)

    def test_format_is_stable(self, scene):
        """Formatting twice gives identical text."""
        assert format_scene_model(scene.model) == format_scene_model(parse_scene_model(format_scene_model(scene.model)))


class TestReferenceHeatmap:
    """Heatmaps from projected visible points."""

    def test_empty_frame(self):
        """Frame without observations gives an all-zero map."""
        model = parse_scene_model(scene_text(visibility=""))
        heat = reference_heatmap(model, 0)
        assert heat.values.shape == (100, 100)
        assert not heat.values.any()

    def test_rounding(self):
        """Projection at (50.4, 49.6) marks cell (50, 50)."""
        model = parse_scene_model(scene_text(points="0 0.02 -0.02 5", visibility="0 0 50 50"))
        heat = reference_heatmap(model, 0)
        assert heat.values[50, 50] == 1.0
        assert heat.values.sum() == 1.0

    def test_unknown_image(self):
        """Unknown image id raises UnknownImage."""
        with pytest.raises(UnknownImage):
            reference_heatmap(parse_scene_model(MINIMAL), 3)

    def test_counts_distinct_cells(self, scene):
        """Sum equals the number of distinct rounded projections."""
        for image_id in scene.model.image_ids[:5]:
            frame = scene.model.frame(image_id)
            k = frame.intrinsics
            world = np.array([scene.model.points[o.point_id] for o in scene.model.observations(image_id)])
            pixels, _ = project_points(k, frame.pose, world)
            cells = {
                (int(np.floor(v + 0.5)), int(np.floor(u + 0.5)))
                for u, v in pixels
                if 0 <= np.floor(u + 0.5) < k.width and 0 <= np.floor(v + 0.5) < k.height
            }
            heat = reference_heatmap(scene.model, image_id)
            assert heat.values.sum() == len(cells)
            assert heat.values.sum() <= len(world)

    def test_binary_and_deterministic(self, scene):
        """Values are exactly 0 or 1 and repeat bit-for-bit."""
        a = reference_heatmap(scene.model, 3)
        b = reference_heatmap(scene.model, 3)
        assert set(np.unique(a.values)) <= {0.0, 1.0}
        assert np.array_equal(a.values, b.values)

    def test_point_filter(self, scene):
        """Restricting point ids never adds cells."""
        full = reference_heatmap(scene.model, 0)
        some = reference_heatmap(scene.model, 0, point_ids={0, 1, 2})
        assert np.all(some.values <= full.values)


class TestVisibleObservations:
    """Observed pixel and world point pairs."""

    def test_empty(self):
        """No observations gives an empty list."""
        assert visible_observations(parse_scene_model(scene_text(visibility="")), 0) == []

    def test_sorted_and_complete(self, scene):
        """Pairs follow ascending point id and cover every record."""
        pairs = visible_observations(scene.model, 2)
        ids = sorted(o.point_id for o in scene.model.observations(2))
        assert len(pairs) == len(ids)
        for (pixel, world), pid in zip(pairs, ids):
            assert np.array_equal(world, scene.model.points[pid])

    def test_residual_within_noise(self, scene):
        """Observed pixels re-project within a few sigma of the observation noise."""
        frame = scene.model.frame(1)
        for pixel, world in visible_observations(scene.model, 1):
            projected, _ = project_points(frame.intrinsics, frame.pose, world)
            assert np.linalg.norm(projected[0] - pixel) < 6 * scene.spec.pixel_noise


class TestHeatmapFiles:
    """Heatmap PGM export."""

    def test_values_out_of_range(self):
        """Heatmaps reject values outside [0, 1]."""
        with pytest.raises(ValidationError):
            Heatmap(np.full((2, 2), 1.5))

    def test_pgm_roundtrip(self, tmp_path):
        """Export quantises to round(255 * value)."""
        heat = Heatmap(np.array([[0.0, 0.5], [1.0, 0.2]]))
        save_heatmap_pgm(heat, tmp_path / "h.pgm")
        loaded = load_heatmap_pgm(tmp_path / "h.pgm")
        assert np.allclose(loaded.values * 255, [[0, 128], [255, 51]])

    def test_rounded_cells(self):
        """Half-integers round up; outside pixels are flagged."""
        rows, cols, inside = rounded_cells(np.array([[1.5, 2.49], [-0.6, 0.0], [np.inf, 1.0]]), 4, 4)
        assert (rows[0], cols[0]) == (2, 2)
        assert list(inside) == [True, False, False]
