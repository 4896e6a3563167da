#!/usr/bin/env python3
"""
Unit Tests for Sliding-Point Label Generation.

This module contains pytest tests for:
- map_sliding_point() / sliding_points(): cell-center convention
- assign_scale_group(): half-open scale ranges
- encode_targets() / decode_targets(): normalized vertex offsets
- generate_labels(): hand-built scenes and a brute-force oracle
- check_scale_rule(): lower bound / stride report

Run tests with:
    pytest tests/test_labeling.py -v
"""

import math
import os
import sys

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scripts.data_io import SynthConfig, gen_scene
from scripts.errors import DegenerateQuad, InvalidNorm
from scripts.geometry import Point2, canonicalize, make_rect
from scripts.labeling import (
    IGNORE,
    NEGATIVE,
    OUT_OF_RANGE,
    POSITIVE,
    LevelSpec,
    PyramidSpec,
    TextInstance,
    assign_scale_group,
    check_scale_rule,
    class_grid_to_pgm,
    decode_targets,
    decode_targets_batch,
    encode_targets,
    generate_labels,
    map_sliding_point,
    sliding_points,
)

RF_P4 = 155.0


@pytest.fixture
def spec():
    """Fixture: default P2/P3/P4 pyramid with the P4 norm from a 155 px receptive field."""
    return PyramidSpec.default(RF_P4)


def bar(x0, y0, x1, y1, ignore=False) -> TextInstance:
    """Axis-aligned instance from its corners."""
    return TextInstance.from_quad(canonicalize([(x0, y0), (x1, y0), (x1, y1), (x0, y1)]), ignore=ignore)


def oracle_labels(instances, image_size, spec):
    """Cell-by-cell reference labels using shapely containment."""
    out = {}
    for li, level in enumerate(spec.levels):
        gh, gw = level.grid_shape(image_size)
        classes = np.full((gh, gw), NEGATIVE, dtype=np.int8)
        ids = np.full((gh, gw), -1, dtype=np.int64)
        rects = [Polygon(inst.rect.vertices) for inst in instances]
        cores = [Polygon(inst.core.vertices) for inst in instances]
        for r in range(gh):
            for c in range(gw):
                p = Point((c + 0.5) * level.stride, (r + 0.5) * level.stride)
                owner, owner_d = -1, math.inf
                in_any_rect = False
                for k, inst in enumerate(instances):
                    if not rects[k].covers(p):
                        continue
                    in_any_rect = True
                    s = inst.rect.short_side
                    own = (not inst.ignore) and level.scale_lo <= s < level.scale_hi
                    if own and cores[k].covers(p):
                        ctr = inst.rect.vertices.mean(axis=0)
                        d = (p.x - ctr[0]) ** 2 + (p.y - ctr[1]) ** 2
                        if d < owner_d:
                            owner, owner_d = k, d
                if owner >= 0:
                    classes[r, c] = POSITIVE
                    ids[r, c] = owner
                elif in_any_rect:
                    classes[r, c] = IGNORE
        out[level.name] = (classes, ids)
    return out


class TestPyramidSpec:
    """Test suite for LevelSpec and PyramidSpec."""

    # ==================== Tests for PyramidSpec.default() ====================

    def test_default_levels(self, spec):
        """Test strides, scale ranges and norms of the default pyramid."""
        assert spec.names == ["P2", "P3", "P4"]
        assert [lvl.stride for lvl in spec.levels] == [4, 8, 16]
        assert [(lvl.scale_lo, lvl.scale_hi) for lvl in spec.levels] == [(4, 24), (24, 48), (48, math.inf)]
        assert [lvl.norm for lvl in spec.levels] == [24.0, 48.0, 77.5], "P4 norm is half the receptive field"

    def test_explicit_p4_norm(self):
        """Test norm_p4 replaces alpha * rf."""
        assert PyramidSpec.default(RF_P4, norm_p4=64.0).levels[2].norm == 64.0

    def test_non_contiguous_ranges_rejected(self):
        """Test a gap between scale groups is rejected."""
        with pytest.raises(ValueError):
            PyramidSpec((LevelSpec("P2", 4, 4, 24, 24), LevelSpec("P3", 8, 30, math.inf, 48)))

    def test_non_increasing_strides_rejected(self):
        """Test strides must grow with the level."""
        with pytest.raises(ValueError):
            PyramidSpec((LevelSpec("P2", 8, 4, 24, 24), LevelSpec("P3", 8, 24, math.inf, 48)))

    def test_non_positive_norm_rejected(self):
        """Test a zero norm raises InvalidNorm."""
        with pytest.raises(InvalidNorm):
            LevelSpec("P2", 4, 4, 24, 0.0)

    def test_grid_shape_rounds_up(self, spec):
        """Test grid shapes use ceil(H / stride)."""
        assert spec.levels[2].grid_shape((40, 70)) == (3, 5)


class TestSlidingPoints:
    """Test suite for map_sliding_point() and sliding_points()."""

    # ==================== Tests for map_sliding_point() ====================

    def test_p2_origin(self, spec):
        """Test P2 cell (0,0) maps to (2,2)."""
        assert map_sliding_point(spec.levels[0], 0, 0, (1, 1)) == Point2(2.0, 2.0)

    def test_p4_cell(self, spec):
        """Test P4 cell (row 3, col 5) maps to (88, 56)."""
        assert map_sliding_point(spec.levels[2], 3, 5, (4, 6)) == Point2(88.0, 56.0)

    def test_negative_index_raises(self, spec):
        """Test negative cell indices raise IndexError."""
        with pytest.raises(IndexError):
            map_sliding_point(spec.levels[0], -1, 0, (4, 4))

    def test_outside_grid_raises(self, spec):
        """Test indices past the grid raise IndexError when the grid is given."""
        with pytest.raises(IndexError):
            map_sliding_point(spec.levels[1], 4, 0, grid_shape=(4, 4))
        with pytest.raises(IndexError):
            map_sliding_point(spec.levels[2], 0, 6, (4, 6))

    def test_grid_shape_is_required(self, spec):
        """Test a call without the grid shape is refused instead of going unchecked."""
        with pytest.raises(TypeError):
            map_sliding_point(spec.levels[0], 100, 100)

    def test_sliding_points_grid(self, spec):
        """Test the dense grid agrees with map_sliding_point()."""
        level = spec.levels[1]
        pts = sliding_points(level, (3, 4))
        assert pts.shape == (3, 4, 2)
        for r in range(3):
            for c in range(4):
                p = map_sliding_point(level, r, c, (3, 4))
                assert tuple(pts[r, c]) == (p.x, p.y)


class TestScaleGroups:
    """Test suite for assign_scale_group()."""

    # ==================== Tests for assign_scale_group() ====================

    @pytest.mark.parametrize("short_side,expected", [
        (10.0, 0),
        (30.0, 1),
        (24.0, 1),
        (47.999, 1),
        (48.0, 2),
        (400.0, 2),
        (2.0, OUT_OF_RANGE),
    ])
    def test_assignment(self, spec, short_side, expected):
        """Test the shorter side picks the half-open group."""
        inst = TextInstance.from_quad(make_rect(200, 200, short_side * 2, short_side).quad)
        assert assign_scale_group(inst, spec) == expected

    def test_shorter_side_uses_enclosing_rect(self, spec):
        """Test a rotated bar is grouped by its rectangle, not its bounding box."""
        inst = TextInstance.from_quad(make_rect(200, 200, 100, 20, 45).quad)
        assert inst.short_side == pytest.approx(20.0)
        assert assign_scale_group(inst, spec) == 0


class TestOffsetCoding:
    """Test suite for encode_targets() and decode_targets()."""

    # ==================== Tests for encode_targets() ====================

    def test_encode_example(self):
        """Test a 24 px square around (100,100) with norm 24 gives +-0.5."""
        rect = make_rect(100, 100, 24, 24)
        t = encode_targets(Point2(100, 100), rect, 24.0)
        np.testing.assert_allclose(t, [-0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, 0.5])

    def test_doubling_norm_halves_offsets(self):
        """Test offsets scale inversely with the norm."""
        rect = make_rect(100, 100, 24, 24)
        t24 = encode_targets(Point2(100, 100), rect, 24.0)
        t48 = encode_targets(Point2(100, 100), rect, 48.0)
        np.testing.assert_allclose(t48, t24 / 2)

    def test_invalid_norm(self):
        """Test a zero norm raises InvalidNorm."""
        with pytest.raises(InvalidNorm):
            encode_targets(Point2(0, 0), make_rect(5, 5, 4, 4), 0.0)

    # ==================== Tests for decode_targets() ====================

    def test_round_trip(self):
        """Test decode(encode(rect)) recovers a rotated rectangle."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            rect = make_rect(*rng.uniform(20, 200, 2), *rng.uniform(5, 80, 2), rng.uniform(-90, 90))
            p = Point2(*rng.uniform(0, 220, 2))
            norm = float(rng.choice([24.0, 48.0, 77.5]))
            q = decode_targets(p, encode_targets(p, rect, norm), norm)
            np.testing.assert_allclose(q.vertices, rect.vertices, atol=1e-9)

    def test_zero_offsets_are_degenerate(self):
        """Test all-zero offsets decode to a point and raise."""
        with pytest.raises(DegenerateQuad):
            decode_targets(Point2(10, 10), np.zeros(8), 24.0)

    def test_batch_marks_degenerate_rows(self):
        """Test decode_targets_batch() flags zero offsets as invalid."""
        rect = make_rect(50, 50, 30, 10)
        pts = np.array([[50.0, 50.0], [10.0, 10.0]])
        offsets = np.stack([encode_targets(Point2(50, 50), rect, 24.0), np.zeros(8)])
        verts, valid = decode_targets_batch(pts, offsets, 24.0)
        assert valid.tolist() == [True, False]
        np.testing.assert_allclose(verts[0], rect.vertices, atol=1e-9)


class TestGenerateLabels:
    """Test suite for generate_labels()."""

    # ==================== Tests for generate_labels() ====================

    def test_empty_scene_is_all_negative(self, spec):
        """Test no instances gives only negatives."""
        labels = generate_labels([], (64, 64), spec)
        for name in spec.names:
            assert labels[name].count(NEGATIVE) == labels[name].classes.size
        assert labels.positive_count() == 0

    def test_small_bar_example(self, spec):
        """Test the 32x32 image with GT (8,12)-(28,20) gives 10 P2 positives."""
        inst = bar(8, 12, 28, 20)
        labels = generate_labels([inst], (32, 32), spec)
        p2 = labels["P2"]
        assert p2.count(POSITIVE) == 10, "Core x in [10,26], y in [14,18] holds 5 x 2 P2 centers"
        rows, cols = np.nonzero(p2.classes == POSITIVE)
        assert set(rows.tolist()) == {3, 4}
        assert set(cols.tolist()) == {2, 3, 4, 5, 6}
        assert (p2.instance_ids[rows, cols] == 0).all()
        # Other-level cells inside the rectangle are "don't care".
        for name in ("P3", "P4"):
            level = labels[name]
            pts = sliding_points(level.level, level.shape)
            inside = (pts[..., 0] >= 8) & (pts[..., 0] <= 28) & (pts[..., 1] >= 12) & (pts[..., 1] <= 20)
            assert (level.classes[inside] == IGNORE).all()
            assert (level.classes[~inside] == NEGATIVE).all()
            assert level.count(POSITIVE) == 0

    def test_targets_point_at_rect_vertices(self, spec):
        """Test positive targets decode back to the instance rectangle."""
        inst = bar(8, 12, 28, 20)
        labels = generate_labels([inst], (32, 32), spec)
        p2 = labels["P2"]
        for r, c in zip(*np.nonzero(p2.classes == POSITIVE)):
            p = map_sliding_point(p2.level, r, c, p2.shape)
            q = decode_targets(p, p2.targets[r, c], p2.level.norm)
            np.testing.assert_allclose(q.vertices, inst.rect.vertices, atol=1e-12)

    def test_ignore_flag_overrides(self, spec):
        """Test an ignore-flagged instance has no positives, only IGNORE inside."""
        labels = generate_labels([bar(8, 12, 28, 20, ignore=True)], (32, 32), spec)
        assert labels.positive_count() == 0
        assert labels["P2"].count(IGNORE) > 0

    def test_tiny_text_is_ignored_everywhere(self, spec):
        """Test text below the smallest group never becomes positive."""
        labels = generate_labels([bar(8, 9, 24, 11.5)], (32, 32), spec)
        assert labels.positive_count() == 0
        assert labels["P2"].count(IGNORE) > 0

    def test_positive_beats_ignore(self, spec):
        """Test a core cell inside another instance's rectangle stays positive."""
        small = bar(4, 14, 60, 26)
        big = bar(0, 0, 64, 64, ignore=True)
        labels = generate_labels([small, big], (64, 64), spec)
        assert labels["P2"].count(POSITIVE) > 0

    def test_overlapping_cores_nearest_center(self, spec):
        """Test overlapping cores go to the nearer rectangle center."""
        a = bar(0, 20, 40, 32)
        b = bar(16, 20, 56, 32)
        labels = generate_labels([a, b], (64, 64), spec)
        p2 = labels["P2"]
        for r, c in zip(*np.nonzero(p2.classes == POSITIVE)):
            p = map_sliding_point(p2.level, r, c, p2.shape)
            da = (p.x - 20) ** 2 + (p.y - 26) ** 2
            db = (p.x - 36) ** 2 + (p.y - 26) ** 2
            expected = 0 if da <= db else 1
            assert p2.instance_ids[r, c] == expected, f"cell ({r},{c}) should belong to instance {expected}"

    def test_ids_only_on_positive_cells(self, spec):
        """Test instance ids are -1 off the positive cells."""
        labels = generate_labels([bar(8, 12, 28, 20)], (32, 32), spec)
        for name in spec.names:
            lv = labels[name]
            assert ((lv.instance_ids >= 0) == (lv.classes == POSITIVE)).all()

    def test_deterministic(self, spec):
        """Test two calls give identical grids."""
        scene = gen_scene(SynthConfig(image_size=(128, 128), short_side=(8.0, 64.0)), 3)
        a = generate_labels(scene.instances, scene.size, spec)
        b = generate_labels(scene.instances, scene.size, spec)
        for name in spec.names:
            np.testing.assert_array_equal(a[name].classes, b[name].classes)
            np.testing.assert_array_equal(a[name].targets, b[name].targets)

    def test_class_grid_to_pgm(self):
        """Test the gray mapping 0 / 128 / 255."""
        grid = np.array([[NEGATIVE, IGNORE, POSITIVE]], dtype=np.int8)
        assert class_grid_to_pgm(grid).tolist() == [[0, 128, 255]]

    @pytest.mark.slow
    def test_matches_brute_force_oracle(self, spec):
        """Test 100 synthetic scenes against the cell-by-cell oracle."""
        cfg = SynthConfig(image_size=(128, 128), short_side=(6.0, 90.0), ignore_prob=0.2, seed=4)
        for index in range(100):
            scene = gen_scene(cfg, index)
            labels = generate_labels(scene.instances, scene.size, spec)
            expected = oracle_labels(scene.instances, scene.size, spec)
            for name in spec.names:
                classes, ids = expected[name]
                lv = labels[name]
                np.testing.assert_array_equal(lv.classes, classes, err_msg=f"{scene.id} {name} classes")
                pos = classes == POSITIVE
                np.testing.assert_array_equal(lv.instance_ids[pos], ids[pos], err_msg=f"{scene.id} {name} ids")
                # No positives may come from text assigned elsewhere.
                for r, c in zip(*np.nonzero(pos)):
                    inst = scene.instances[lv.instance_ids[r, c]]
                    assert lv.level.contains(inst.short_side) and not inst.ignore


class TestScaleRule:
    """Test suite for check_scale_rule()."""

    # ==================== Tests for check_scale_rule() ====================

    def test_default_pyramid_ratios(self, spec):
        """Test P3 and P4 span exactly three cells at their lower bound; P2 is exempt."""
        rows = {row["level"]: row for row in check_scale_rule(spec)}
        assert rows["P2"]["ratio"] == 1.0 and rows["P2"]["exempt"]
        assert rows["P3"]["ratio"] == 3.0 and rows["P3"]["satisfied"]
        assert rows["P4"]["ratio"] == 3.0 and rows["P4"]["satisfied"]

    def test_violation_reported(self):
        """Test a coarse stride is flagged."""
        spec = PyramidSpec.default(RF_P4, strides=(4, 16, 32))
        rows = {row["level"]: row for row in check_scale_rule(spec)}
        assert not rows["P3"]["satisfied"]
        assert not rows["P4"]["satisfied"]


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
