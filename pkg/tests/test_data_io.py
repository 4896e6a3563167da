#!/usr/bin/env python3
"""
Unit Tests for Scene Data I/O.

This module contains pytest tests for:
- gen_scene(): synthetic bar scenes
- parse_icdar_gt() / parse_icdar_gt_lenient() / serialize_icdar_gt()
- save_ppm() / load_ppm(): binary PNM images
- resize_scene() / resize_shorter_side()
- write_dataset() / load_dataset() / SceneDataset
- render_svg(): overlay documents

Run tests with:
    pytest tests/test_data_io.py -v
"""

import json
import os
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scripts.data_io import (
    DATASET_SCHEMA,
    Overlay,
    Scene,
    SceneDataset,
    SynthConfig,
    gen_scene,
    gen_scenes,
    load_dataset,
    load_ppm,
    parse_icdar_gt,
    parse_icdar_gt_lenient,
    parse_icdar_line,
    render_svg,
    resize_scene,
    resize_shorter_side,
    save_ppm,
    scene_overlays,
    serialize_icdar_gt,
    write_dataset,
)
from scripts.errors import DegenerateQuad, FormatError, ParseError
from scripts.geometry import points_in_convex_polygon

FIXTURE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "icdar_fixture.txt")
SVG_NS = "{http://www.w3.org/2000/svg}"


@pytest.fixture
def fixture_text():
    """Fixture: the annotation sample with one malformed line."""
    with open(FIXTURE, "r", encoding="utf-8") as f:
        return f.read()


@pytest.fixture
def synth_cfg():
    """Fixture: noise-free synthetic settings on 96 x 128 images."""
    return SynthConfig(image_size=(96, 128), short_side=(6.0, 40.0), noise_sigma=0.0, ignore_prob=0.3, seed=1)


class TestSynthetic:
    """Test suite for gen_scene()."""

    # ==================== Tests for gen_scene() ====================

    def test_deterministic(self, synth_cfg):
        """Test a scene is a pure function of (seed, index)."""
        a, b = gen_scene(synth_cfg, 3), gen_scene(synth_cfg, 3)
        np.testing.assert_array_equal(a.image, b.image)
        assert [i.quad for i in a.instances] == [i.quad for i in b.instances]
        assert a.id == "img_4"

    def test_bars_inside_image(self, synth_cfg):
        """Test every GT vertex lies inside the image."""
        for scene in gen_scenes(synth_cfg, 20):
            assert scene.image.shape == (3, 96, 128)
            for inst in scene.instances:
                v = inst.quad.vertices
                assert v[:, 0].min() >= 0 and v[:, 0].max() <= 128
                assert v[:, 1].min() >= 0 and v[:, 1].max() <= 96

    def test_pixel_audit(self, synth_cfg):
        """Test pixels inside a bar are bright and every other pixel is dark."""
        for scene in gen_scenes(synth_cfg, 10):
            h, w = scene.size
            ys, xs = np.mgrid[0:h, 0:w]
            centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
            inside = np.zeros(h * w, dtype=bool)
            for inst in scene.instances:
                inside |= points_in_convex_polygon(centers, inst.rect)
            gray = scene.image[0].reshape(-1)
            assert (gray[inside] >= 0.65).all() and (gray[inside] <= 1.0).all()
            assert (gray[~inside] >= 0.0).all() and (gray[~inside] <= 0.35).all()

    def test_ignore_transcriptions(self, synth_cfg):
        """Test ignore-flagged bars carry "###" and the others "bar<k>"."""
        instances = [i for s in gen_scenes(synth_cfg, 20) for i in s.instances]
        assert any(i.ignore for i in instances) and not all(i.ignore for i in instances)
        for inst in instances:
            if inst.ignore:
                assert inst.transcription == "###"
            else:
                assert inst.transcription.startswith("bar")

    def test_cores_do_not_overlap(self, synth_cfg):
        """Test no two cores of one scene share area."""
        from scripts.geometry import intersect_convex, polygon_area

        for scene in gen_scenes(synth_cfg, 10):
            cores = [i.core for i in scene.instances]
            for a in range(len(cores)):
                for b in range(a + 1, len(cores)):
                    inter = intersect_convex(cores[a], cores[b])
                    assert len(inter) < 3 or polygon_area(inter) == 0.0

    @pytest.mark.parametrize("kwargs", [
        {"image_size": (100, 128)},
        {"short_side": (0.5, 10.0)},
        {"short_side": (8.0, 300.0)},
        {"aspect": (0.5, 2.0)},
        {"ignore_prob": 1.5},
    ])
    def test_config_validation(self, kwargs):
        """Test impossible generator settings are refused."""
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


class TestAnnotations:
    """Test suite for the annotation format."""

    # ==================== Tests for parse_icdar_line() ====================

    def test_line_with_script(self):
        """Test the optional script field is recognized."""
        inst = parse_icdar_line("10,10,110,10,110,40,10,40,Latin,HELLO", 1)
        assert inst.script == "Latin"
        assert inst.transcription == "HELLO"
        assert not inst.ignore
        assert inst.short_side == pytest.approx(30.0)

    def test_line_without_script(self):
        """Test a single trailing field is the transcription."""
        inst = parse_icdar_line("200,20,260,20,260,50,200,50,WORLD", 1)
        assert inst.script is None and inst.transcription == "WORLD"

    def test_ignore_flag(self):
        """Test "###" marks a do-not-care region."""
        assert parse_icdar_line("120,120,180,120,180,140,120,140,###", 1).ignore

    def test_any_script_name(self):
        """Test the field before the transcription is the script, whatever its name."""
        inst = parse_icdar_gt("1,1,40,1,40,20,1,20,Cyrillic,HELLO")[0]
        assert inst.script == "Cyrillic"
        assert inst.transcription == "HELLO"

    def test_last_field_is_transcription(self):
        """Test only the last two trailing fields are read."""
        inst = parse_icdar_line("400,50,500,60,495,110,395,100,Mixed,AB,12", 7)
        assert inst.script == "AB" and inst.transcription == "12"

    def test_counterclockwise_input_is_canonicalized(self):
        """Test vertex order in the file does not matter."""
        a = parse_icdar_line("50,200,50,260,80,260,80,200,x", 1)
        b = parse_icdar_line("50,200,80,200,80,260,50,260,x", 1)
        assert a.quad == b.quad

    def test_blank_line(self):
        """Test blank lines yield nothing."""
        assert parse_icdar_line("   ", 3) is None

    def test_too_few_fields(self):
        """Test "1,2,three" is a ParseError on line 1."""
        with pytest.raises(ParseError) as exc_info:
            parse_icdar_gt("1,2,three\n")
        assert exc_info.value.line_no == 1

    def test_degenerate_quad(self):
        """Test collinear vertices raise DegenerateQuad with the line number."""
        with pytest.raises(DegenerateQuad) as exc_info:
            parse_icdar_gt("10,10,20,10,30,40,10,40,ok\n0,0,10,0,20,0,30,0,flat\n")
        assert exc_info.value.line_no == 2

    # ==================== Tests for the fixture file ====================

    def test_fixture_lenient(self, fixture_text):
        """Test the fixture yields 9 instances, 1 ignored and 1 error on line 8."""
        instances, errors = parse_icdar_gt_lenient(fixture_text)
        assert len(instances) == 9
        assert sum(i.ignore for i in instances) == 1
        assert [e.line_no for e in errors] == [8]
        assert instances[-2].script == "None" and instances[-2].transcription == "plain"
        assert instances[-1].script is None and instances[-1].transcription == "1234"

    def test_fixture_strict(self, fixture_text):
        """Test the strict parser stops at line 8."""
        with pytest.raises(ParseError) as exc_info:
            parse_icdar_gt(fixture_text)
        assert exc_info.value.line_no == 8

    def test_lenient_reports_degenerate_as_parse_error(self):
        """Test degenerate quads become ParseErrors in lenient mode."""
        instances, errors = parse_icdar_gt_lenient("0,0,10,0,20,0,30,0,flat\n")
        assert instances == [] and isinstance(errors[0], ParseError) and errors[0].line_no == 1

    def test_bom_is_stripped(self):
        """Test a UTF-8 BOM does not break the first line."""
        instances = parse_icdar_gt("\ufeff10,10,110,10,110,40,10,40,HELLO\n".encode("utf-8"))
        assert len(instances) == 1

    # ==================== Tests for serialize_icdar_gt() ====================

    @pytest.mark.parametrize("line", [
        "10,10,110,10,110,40,10,40,Latin,HELLO",
        "120,120,180,120,180,140,120,140,###",
        "400,50,500,60,495,110,395,100,Devanagari,AB12",
        "1.5,2.25,30.125,2.25,30.125,12,1.5,12,frac",
    ])
    def test_serialize_exact(self, line):
        """Test canonical lines are written back unchanged."""
        assert serialize_icdar_gt(parse_icdar_gt(line)) == line + "\n"

    def test_serialize_empty(self):
        """Test no instances give an empty file."""
        assert serialize_icdar_gt([]) == ""


class TestImages:
    """Test suite for save_ppm() and load_ppm()."""

    # ==================== Tests for PPM I/O ====================

    def test_two_by_two_fixture(self):
        """Test the P6 header and pixel bytes of a 2 x 2 image."""
        image = np.zeros((3, 2, 2))
        image[0, 0, 0] = 1.0
        image[1, 0, 1] = 1.0
        image[2, 1, 0] = 1.0
        image[:, 1, 1] = 0.5
        data = save_ppm(image)
        assert data.startswith(b"P6\n2 2\n255\n")
        assert data[-12:] == bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128])
        back = load_ppm(data)
        assert back.shape == (3, 2, 2)
        np.testing.assert_allclose(back, np.round(image * 255) / 255)

    def test_gray_round_trip(self, tmp_path):
        """Test one-channel images are written as P5 and read as 1 x H x W."""
        image = np.linspace(0, 1, 12).reshape(1, 3, 4)
        path = tmp_path / "g.pgm"
        assert save_ppm(image, path).startswith(b"P5")
        back = load_ppm(path)
        assert back.shape == (1, 3, 4)
        np.testing.assert_allclose(back, image, atol=0.5 / 255 + 1e-12)

    def test_truncated(self):
        """Test a truncated pixel block raises FormatError."""
        data = save_ppm(np.full((3, 4, 4), 0.3))
        with pytest.raises(FormatError):
            load_ppm(data[:-5])

    def test_bad_magic(self):
        """Test ASCII P3 files are refused."""
        with pytest.raises(FormatError):
            load_ppm(b"P3\n1 1\n255\n0 0 0\n")

    def test_missing_file(self, tmp_path):
        """Test a missing file raises FormatError."""
        with pytest.raises(FormatError):
            load_ppm(tmp_path / "nope.ppm")


class TestResize:
    """Test suite for resize_scene() and resize_shorter_side()."""

    @pytest.fixture
    def scene(self):
        """Fixture: 64 x 96 scene with one instance."""
        inst = parse_icdar_line("8,8,72,8,72,40,8,40,word", 1)
        return Scene(np.random.default_rng(0).uniform(size=(3, 64, 96)), [inst], "img_1")

    # ==================== Tests for resize_scene() ====================

    def test_identity(self, scene):
        """Test factor 1 returns an equal copy."""
        out = resize_scene(scene, 1.0)
        np.testing.assert_array_equal(out.image, scene.image)
        assert out.image is not scene.image

    def test_half(self, scene):
        """Test halving scales the content and the GT."""
        out = resize_scene(scene, 0.5)
        assert out.content_size == (32, 48)
        assert out.image.shape == (3, 32, 48)
        np.testing.assert_allclose(out.instances[0].quad.vertices, scene.instances[0].quad.vertices * 0.5)
        assert out.instances[0].short_side == pytest.approx(16.0)

    def test_padding_to_multiple(self, scene):
        """Test odd sizes are edge-padded to multiples of 16."""
        out = resize_scene(scene, 0.4)
        assert out.content_size == (26, 38)
        assert out.image.shape == (3, 32, 48)
        np.testing.assert_array_equal(out.image[:, 26:, :], np.repeat(out.image[:, 25:26, :], 6, axis=1))

    def test_constant_image_stays_constant(self):
        """Test bilinear resampling of a flat image is flat."""
        scene = Scene(np.full((3, 64, 64), 0.25), [], "img_1")
        np.testing.assert_allclose(resize_scene(scene, 0.75).image, 0.25)

    def test_bad_factor(self, scene):
        """Test non-positive factors raise ValueError."""
        with pytest.raises(ValueError):
            resize_scene(scene, 0.0)

    # ==================== Tests for resize_shorter_side() ====================

    def test_shorter_side(self, scene):
        """Test the shorter content side lands on the requested scale."""
        out = resize_shorter_side(scene, 32)
        assert min(out.content_size) == 32
        with pytest.raises(ValueError):
            resize_shorter_side(scene, 8)


class TestDatasets:
    """Test suite for write_dataset(), load_dataset() and SceneDataset."""

    # ==================== Tests for write_dataset() / load_dataset() ====================

    def test_round_trip(self, synth_cfg, tmp_path):
        """Test GT is exact and pixels are within one gray level after a round trip."""
        scenes = gen_scenes(synth_cfg, 5)
        manifest = write_dataset(scenes, tmp_path / "ds", {"seed": 1})
        data = json.loads(manifest.read_text(encoding="utf-8"))
        assert data["schema"] == DATASET_SCHEMA and data["count"] == 5
        loaded = load_dataset(tmp_path / "ds")
        assert [s.id for s in loaded] == [s.id for s in scenes]
        for a, b in zip(scenes, loaded):
            assert [i.quad for i in a.instances] == [i.quad for i in b.instances]
            assert [i.ignore for i in a.instances] == [i.ignore for i in b.instances]
            np.testing.assert_allclose(b.image, a.image, atol=0.5 / 255 + 1e-12)

    def test_byte_identical_rerun(self, synth_cfg, tmp_path):
        """Test writing the same scenes twice produces identical files."""
        scenes = gen_scenes(synth_cfg, 3)
        write_dataset(scenes, tmp_path / "a")
        write_dataset(scenes, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_directory_without_manifest(self, tmp_path):
        """Test loose img_<n>.ppm files load in numeric id order, gray expanded and padded."""
        save_ppm(np.full((1, 20, 20), 0.5), tmp_path / "img_10.ppm")
        save_ppm(np.full((3, 32, 32), 0.2), tmp_path / "img_2.ppm")
        (tmp_path / "gt_img_2.txt").write_text("1,1,20,1,20,9,1,9,hi\n", encoding="utf-8")
        scenes = load_dataset(tmp_path)
        assert [s.id for s in scenes] == ["img_2", "img_10"]
        assert len(scenes[0].instances) == 1 and scenes[1].instances == []
        assert scenes[1].image.shape == (3, 32, 32)
        assert scenes[1].content_size == (20, 20)

    def test_bad_schema(self, tmp_path):
        """Test a foreign manifest raises FormatError."""
        (tmp_path / "manifest.json").write_text(json.dumps({"schema": "other/1", "scenes": []}), encoding="utf-8")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_statistics(self, synth_cfg):
        """Test get_statistics() counts scenes and instances."""
        scenes = gen_scenes(synth_cfg, 6)
        stats = SceneDataset(scenes).get_statistics()
        assert stats["scenes"] == 6
        assert stats["instances"] == sum(len(s.instances) for s in scenes)
        assert stats["ignored"] == sum(s.ignored_count for s in scenes)
        assert 6.0 - 1e-9 <= stats["short_side_min"] <= stats["short_side_max"] <= 40.0 + 1e-9
        assert SceneDataset([]).get_statistics()["short_side_min"] is None


class TestSvg:
    """Test suite for render_svg()."""

    # ==================== Tests for render_svg() ====================

    def test_scene_overlays(self, synth_cfg):
        """Test one polygon per GT rect and core, one per ignored rect."""
        scene = gen_scene(synth_cfg, 0)
        root = ET.fromstring(render_svg(scene, scene_overlays(scene), image_href="img_1.ppm"))
        assert root.get("width") == "128" and root.get("height") == "96"
        polygons = root.findall(f"{SVG_NS}polygon")
        n_ignored = scene.ignored_count
        assert len(polygons) == 2 * (len(scene.instances) - n_ignored) + n_ignored
        assert sum(p.get("class") == "ignore" for p in polygons) == n_ignored

    def test_labels_become_titles(self):
        """Test overlay labels are written as titles."""
        inst = parse_icdar_line("0,0,10,0,10,5,0,5,word", 1)
        root = ET.fromstring(render_svg((16, 16), [Overlay(inst.quad, "detection", "0.93")]))
        poly = root.find(f"{SVG_NS}polygon")
        assert poly.get("points") == "0.00,0.00 10.00,0.00 10.00,5.00 0.00,5.00"
        assert poly.find(f"{SVG_NS}title").text == "0.93"

    def test_unknown_kind(self):
        """Test an unknown overlay kind raises ValueError."""
        inst = parse_icdar_line("0,0,10,0,10,5,0,5,word", 1)
        with pytest.raises(ValueError):
            render_svg((16, 16), [Overlay(inst.quad, "heatmap")])


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
