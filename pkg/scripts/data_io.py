#!/usr/bin/env python3
"""
Scenes, Synthetic Data and Annotation I/O.

This module provides:
- Scene / SynthConfig and gen_scene(): deterministic rotated-bar scenes
- parse_icdar_gt() / parse_icdar_gt_lenient() / serialize_icdar_gt()
- write_dataset() / load_dataset() / SceneDataset: img_<n>.ppm + gt_img_<n>.txt
- load_ppm() / save_ppm() / save_pgm(): binary PNM via Pillow
- resize_scene() / resize_shorter_side(): bilinear test-time resizing
- render_svg(): static polygon overlays

Dataset layout:
    <dir>/manifest.json        schema "afrpn.dataset/1"
    <dir>/img_<n>.ppm          8-bit P6 image
    <dir>/gt_img_<n>.txt       x1,y1,...,x4,y4[,script],transcription
"""

import io
import json
import logging
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates

from scripts.errors import DegenerateQuad, FormatError, ParseError
from scripts.geometry import OrientedRect, Quad, canonicalize, intersect_convex, make_rect, polygon_area, points_in_convex_polygon
from scripts.labeling import TextInstance

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "afrpn.dataset/1"
IGNORE_TRANSCRIPTION = "###"
SIZE_MULTIPLE = 16

PathLike = Union[str, Path]


# ==================== Types ====================


@dataclass
class Scene:
    """
    One image with its ground truth.

    Attributes:
        image (np.ndarray): 3 x H x W float64 in [0, 1], H and W multiples of 16
        instances (List[TextInstance]): ground-truth instances
        id (str): scene id, "img_<n>"
        content_size (Optional[Tuple[int, int]]): (H, W) before edge padding
    """

    image: np.ndarray
    instances: List[TextInstance]
    id: str
    content_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.content_size is None:
            self.content_size = (int(self.image.shape[1]), int(self.image.shape[2]))

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.image.shape[1]), int(self.image.shape[2])

    @property
    def ignored_count(self) -> int:
        return sum(1 for inst in self.instances if inst.ignore)


@dataclass(frozen=True)
class SynthConfig:
    """
    Generator settings for synthetic bar scenes.

    Attributes:
        image_size (Tuple[int, int]): (H, W), multiples of 16
        instance_count (Tuple[int, int]): inclusive range of bars per scene
        short_side (Tuple[float, float]): shorter-side range in px
        aspect (Tuple[float, float]): long/short ratio range
        angle (Tuple[float, float]): orientation range in degrees
        background (Tuple[float, float]): background intensity range
        fill (Tuple[float, float]): bar intensity range
        noise_sigma (float): additive Gaussian noise
        ignore_prob (float): probability a bar is annotated "###"
        seed (int): generator seed
        max_attempts (int): placements tried per bar before it is skipped
    """

    image_size: Tuple[int, int] = (256, 256)
    instance_count: Tuple[int, int] = (1, 6)
    short_side: Tuple[float, float] = (8.0, 120.0)
    aspect: Tuple[float, float] = (1.5, 6.0)
    angle: Tuple[float, float] = (-60.0, 60.0)
    background: Tuple[float, float] = (0.0, 0.35)
    fill: Tuple[float, float] = (0.65, 1.0)
    noise_sigma: float = 0.05
    ignore_prob: float = 0.05
    seed: int = 0
    max_attempts: int = 50

    def __post_init__(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValueError(f"image_size must be positive multiples of {SIZE_MULTIPLE}, got {self.image_size}")
        for name in ("instance_count", "short_side", "aspect", "angle", "background", "fill"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.short_side[0] < 1.0:
            raise ValueError("minimum shorter side must be >= 1 px")
        if self.short_side[1] > min(h, w):
            raise ValueError(f"maximum shorter side {self.short_side[1]} does not fit a {h}x{w} image")
        if self.aspect[0] < 1.0:
            raise ValueError("aspect ratios are long/short and must be >= 1")
        if not 0.0 <= self.ignore_prob <= 1.0:
            raise ValueError("ignore_prob must be in [0, 1]")
        if self.noise_sigma < 0 or self.max_attempts <= 0:
            raise ValueError("noise_sigma must be >= 0 and max_attempts > 0")


def scene_id(index: int) -> str:
    return f"img_{index + 1}"


def scene_sort_key(sid: str):
    """Numeric order for "img_<n>" ids; other ids sort after, by name."""
    m = re.fullmatch(r"img_(\d+)", sid)
    return (0, int(m.group(1)), "") if m else (1, 0, sid)


# ==================== Synthetic scenes ====================


def _cores_overlap(a: OrientedRect, b: OrientedRect) -> bool:
    inter = intersect_convex(a, b)
    return len(inter) >= 3 and polygon_area(inter) > 0.0


def gen_scene(
    cfg: SynthConfig,
    index: int,
    short_factor: float = 0.5,
    long_factor: float = 0.8,
) -> Scene:
    """
    Render one synthetic scene of rotated solid bars.

    The scene is a pure function of (cfg.seed, index). GT quads are the
    exact bar rectangles, which always lie inside the image. A bar whose
    core would overlap an earlier core is re-sampled; after
    cfg.max_attempts failures it is skipped.

    Args:
        cfg: generator settings
        index: scene index (0-based); the id is "img_<index + 1>"
        short_factor, long_factor: core shrink factors

    Returns:
        Scene with a 3 x H x W image
    """
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    count = int(rng.integers(cfg.instance_count[0], cfg.instance_count[1] + 1))

    background = rng.uniform(*cfg.background)
    image = np.full((3, h, w), background, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    pixel_centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)

    instances: List[TextInstance] = []
    skipped = 0
    for k in range(count):
        placed = None
        for _ in range(cfg.max_attempts):
            short = rng.uniform(*cfg.short_side)
            long = max(short, min(short * rng.uniform(*cfg.aspect), 0.95 * min(h, w)))
            angle = rng.uniform(*cfg.angle)
            cx = rng.uniform(0.0, w)
            cy = rng.uniform(0.0, h)
            rect = make_rect(cx, cy, long, short, angle)
            v = rect.vertices
            if v[:, 0].min() < 0 or v[:, 1].min() < 0 or v[:, 0].max() > w or v[:, 1].max() > h:
                continue
            inst = TextInstance.from_quad(rect.quad, short_factor=short_factor, long_factor=long_factor)
            if any(_cores_overlap(inst.core, other.core) for other in instances):
                continue
            placed = inst
            break
        if placed is None:
            skipped += 1
            continue
        if rng.random() < cfg.ignore_prob:
            placed.ignore = True
            placed.transcription = IGNORE_TRANSCRIPTION
        else:
            placed.transcription = f"bar{k}"
        inside = points_in_convex_polygon(pixel_centers, placed.rect).reshape(h, w)
        image[:, inside] = rng.uniform(*cfg.fill)
        instances.append(placed)

    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    if skipped:
        logger.debug(f"{scene_id(index)}: skipped {skipped} bars after {cfg.max_attempts} attempts")
    return Scene(image=image, instances=instances, id=scene_id(index))


def gen_scenes(cfg: SynthConfig, count: int, start: int = 0) -> List[Scene]:
    return [gen_scene(cfg, i) for i in range(start, start + count)]


# ==================== ICDAR annotations ====================


def parse_icdar_line(
    line: str,
    line_no: int,
    short_factor: float = 0.5,
    long_factor: float = 0.8,
) -> Optional[TextInstance]:
    """
    Parse one "x1,y1,...,x4,y4[,script],transcription" line.

    After the 8 coordinates the last field is the transcription and the
    field before it, if any, is the script; earlier fields are dropped.

    Returns:
        TextInstance, or None for a blank line

    Raises:
        ParseError: fewer than 8 coordinates or a non-numeric coordinate
        DegenerateQuad: zero-area or self-intersecting quad
    """
    text = line.lstrip("\ufeff").strip()
    if not text:
        return None
    fields = text.split(",")
    if len(fields) < 8:
        raise ParseError(f"expected 8 coordinates, found {len(fields)} fields", line_no)
    try:
        coords = [float(f) for f in fields[:8]]
    except ValueError as e:
        raise ParseError(f"non-numeric coordinate ({e})", line_no) from e
    if not all(math.isfinite(c) for c in coords):
        raise ParseError("non-finite coordinate", line_no)

    rest = [f.strip() for f in fields[8:]]
    transcription = rest[-1] if rest else None
    script = rest[-2] if len(rest) >= 2 else None
    ignore = transcription is not None and transcription.strip() == IGNORE_TRANSCRIPTION

    try:
        quad = canonicalize(np.array(coords).reshape(4, 2))
        return TextInstance.from_quad(quad, ignore, transcription, script, short_factor, long_factor)
    except DegenerateQuad as e:
        raise DegenerateQuad(str(e), line_no) from e


def parse_icdar_gt_lenient(
    text: Union[str, bytes],
    short_factor: float = 0.5,
    long_factor: float = 0.8,
) -> Tuple[List[TextInstance], List[ParseError]]:
    """
    Parse an annotation file, collecting bad lines instead of failing.

    Degenerate quads are reported as ParseError with their line number.

    Returns:
        Tuple of (instances, errors)
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8-sig")
    instances, errors = [], []
    for line_no, line in enumerate(text.splitlines(), start=1):
        try:
            inst = parse_icdar_line(line, line_no, short_factor, long_factor)
        except ParseError as e:
            errors.append(e)
            continue
        except DegenerateQuad as e:
            errors.append(ParseError(str(e).split(": ", 1)[-1], line_no))
            continue
        if inst is not None:
            instances.append(inst)
    return instances, errors


def parse_icdar_gt(
    text: Union[str, bytes],
    short_factor: float = 0.5,
    long_factor: float = 0.8,
) -> List[TextInstance]:
    """
    Strict annotation parser.

    Raises:
        ParseError: first malformed line
        DegenerateQuad: first degenerate quad, with its line number
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8-sig")
    instances = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        inst = parse_icdar_line(line, line_no, short_factor, long_factor)
        if inst is not None:
            instances.append(inst)
    return instances


def _format_coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_icdar_gt(instances: Sequence[TextInstance]) -> str:
    """Write instances back in the annotation format; coordinates are exact."""
    lines = []
    for inst in instances:
        parts = [_format_coord(v) for v in inst.quad.vertices.reshape(-1)]
        if inst.script is not None:
            parts.append(inst.script)
        if inst.ignore:
            parts.append(IGNORE_TRANSCRIPTION)
        elif inst.transcription is not None:
            parts.append(inst.transcription)
        lines.append(",".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


# ==================== Images ====================


def _to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        else:
            arr = np.transpose(arr, (1, 2, 0))
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def save_ppm(image: np.ndarray, path: Optional[PathLike] = None) -> bytes:
    """
    Encode a C x H x W (C in {1, 3}) or H x W image in [0, 1] as binary PNM.

    Three channels give P6, one channel P5. The bytes are also written
    to `path` when given.
    """
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(image)).save(buf, format="PPM")
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def save_pgm(grid: np.ndarray, path: PathLike) -> None:
    """Write an 8-bit H x W array as P5."""
    buf = io.BytesIO()
    Image.fromarray(np.asarray(grid, dtype=np.uint8)).save(buf, format="PPM")
    Path(path).write_bytes(buf.getvalue())


def load_ppm(source: Union[PathLike, bytes]) -> np.ndarray:
    """
    Decode binary P6/P5 to a C x H x W float64 array in [0, 1].

    Raises:
        FormatError: unreadable file, wrong magic, unsupported depth or truncated data
    """
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
        name = "<bytes>"
    else:
        try:
            data = Path(source).read_bytes()
        except OSError as e:
            raise FormatError(f"Cannot read image {source}: {e}") from e
        name = str(source)
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{name}: not a binary PPM/PGM (magic {data[:2]!r})")
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise FormatError(f"{name}: unsupported pixel mode {img.mode} (maxval must be 255)")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError, SyntaxError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{name}: cannot decode image ({e})") from e
    if arr.ndim == 2:
        return arr[None]
    return np.transpose(arr, (2, 0, 1)).copy()


def pad_to_multiple(image: np.ndarray, multiple: int = SIZE_MULTIPLE) -> np.ndarray:
    """Edge-replicate the bottom and right borders up to multiples of `multiple`."""
    _, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")


def as_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


# ==================== Resizing ====================


def _scale_instance(inst: TextInstance, factor: float) -> TextInstance:
    return TextInstance(
        quad=inst.quad.scaled(factor),
        rect=OrientedRect(inst.rect.quad.scaled(factor)),
        core=OrientedRect(inst.core.quad.scaled(factor)),
        ignore=inst.ignore,
        transcription=inst.transcription,
        script=inst.script,
    )


def resize_scene(scene: Scene, factor: float) -> Scene:
    """
    Bilinearly rescale the scene content by `factor`, then edge-pad to multiples of 16.

    GT quads, rects and cores are scaled by the same factor.
    """
    if factor <= 0:
        raise ValueError(f"resize factor must be > 0, got {factor}")
    ch, cw = scene.content_size
    nh = max(1, int(round(ch * factor)))
    nw = max(1, int(round(cw * factor)))
    if nh == ch and nw == cw and factor == 1.0:
        return Scene(scene.image.copy(), list(scene.instances), scene.id, scene.content_size)
    content = scene.image[:, :ch, :cw]
    # Pixel centers map as src = (dst + 0.5) / f - 0.5.
    yy = (np.arange(nh) + 0.5) * (ch / nh) - 0.5
    xx = (np.arange(nw) + 0.5) * (cw / nw) - 0.5
    grid_y, grid_x = np.meshgrid(yy, xx, indexing="ij")
    channels = [map_coordinates(c, [grid_y, grid_x], order=1, mode="nearest") for c in content]
    image = pad_to_multiple(np.clip(np.stack(channels), 0.0, 1.0))
    instances = [_scale_instance(inst, factor) for inst in scene.instances]
    return Scene(image, instances, scene.id, (nh, nw))


def resize_shorter_side(scene: Scene, s: int) -> Scene:
    """Resize so the shorter content side equals `s` px (s >= 16)."""
    if s < SIZE_MULTIPLE:
        raise ValueError(f"test scale must be >= {SIZE_MULTIPLE}, got {s}")
    return resize_scene(scene, s / min(scene.content_size))


# ==================== Datasets ====================


def write_dataset(scenes: Sequence[Scene], out_dir: PathLike, config: Optional[Dict] = None) -> Path:
    """
    Write scenes in the dataset layout with a manifest.

    Reruns with the same scenes produce byte-identical files.

    Returns:
        Path of manifest.json
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        image_name = f"{scene.id}.ppm"
        gt_name = f"gt_{scene.id}.txt"
        save_ppm(scene.image, out / image_name)
        (out / gt_name).write_text(serialize_icdar_gt(scene.instances), encoding="utf-8")
        entries.append({
            "id": scene.id,
            "image": image_name,
            "gt": gt_name,
            "size": list(scene.size),
            "content_size": list(scene.content_size),
            "instances": len(scene.instances),
            "ignored": scene.ignored_count,
        })
    manifest = {"schema": DATASET_SCHEMA, "count": len(entries), "config": config or {}, "scenes": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"✓ Wrote {len(entries)} scenes to {out}")
    return path


def _load_one(
    data_dir: Path,
    sid: str,
    image_name: str,
    gt_name: str,
    strict: bool,
    short_factor: float,
    long_factor: float,
    content_size: Optional[Sequence[int]] = None,
) -> Scene:
    image = as_rgb(load_ppm(data_dir / image_name))
    gt_path = data_dir / gt_name
    raw = gt_path.read_bytes() if gt_path.exists() else b""
    if strict:
        instances = parse_icdar_gt(raw, short_factor, long_factor)
    else:
        instances, errors = parse_icdar_gt_lenient(raw, short_factor, long_factor)
        for e in errors:
            logger.warning(f"{gt_path}: {e}")
    size = tuple(content_size) if content_size else (image.shape[1], image.shape[2])
    return Scene(pad_to_multiple(image), instances, sid, (int(size[0]), int(size[1])))


def load_dataset(
    data_dir: PathLike,
    strict: bool = False,
    short_factor: float = 0.5,
    long_factor: float = 0.8,
) -> List[Scene]:
    """
    Load a dataset directory, ordered by scene id.

    Uses manifest.json when present, otherwise every img_<n>.ppm with
    its gt_img_<n>.txt. Gray images are expanded to three channels and
    all images are edge-padded to multiples of 16.

    Raises:
        FormatError: bad manifest schema or undecodable image
        ParseError / DegenerateQuad: malformed annotation when strict
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    scenes = []
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
        if manifest.get("schema") != DATASET_SCHEMA:
            raise FormatError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")
        for entry in manifest["scenes"]:
            scenes.append(_load_one(data_dir, entry["id"], entry["image"], entry["gt"], strict,
                                    short_factor, long_factor, entry.get("content_size")))
    else:
        for img_path in data_dir.glob("*.ppm"):
            sid = img_path.stem
            scenes.append(_load_one(data_dir, sid, img_path.name, f"gt_{sid}.txt", strict, short_factor, long_factor))
    scenes.sort(key=lambda s: scene_sort_key(s.id))
    logger.info(f"✓ Loaded {len(scenes)} scenes from {data_dir}")
    return scenes


class SceneDataset:
    """In-memory dataset with lookup by id and summary statistics."""

    def __init__(self, scenes: Sequence[Scene]):
        self.scenes: List[Scene] = sorted(scenes, key=lambda s: scene_sort_key(s.id))
        self._by_id = {s.id: s for s in self.scenes}

    @classmethod
    def from_dir(cls, data_dir: PathLike, strict: bool = False) -> "SceneDataset":
        return cls(load_dataset(data_dir, strict))

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int) -> Scene:
        return self.scenes[index]

    def __iter__(self):
        return iter(self.scenes)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.scenes]

    def get(self, sid: str) -> Optional[Scene]:
        return self._by_id.get(sid)

    def get_statistics(self) -> Dict:
        """Counts of scenes, instances and ignored instances, and the shorter-side range."""
        shorts = [inst.short_side for s in self.scenes for inst in s.instances]
        return {
            "scenes": len(self.scenes),
            "instances": len(shorts),
            "ignored": sum(s.ignored_count for s in self.scenes),
            "short_side_min": float(min(shorts)) if shorts else None,
            "short_side_max": float(max(shorts)) if shorts else None,
        }


# ==================== SVG overlays ====================


SVG_STYLES = {
    "gt": {"stroke": "#ffd700", "fill": "none", "stroke-width": "1.5", "stroke-dasharray": "4,2"},
    "core": {"stroke": "#ffd700", "fill": "#ffd700", "fill-opacity": "0.35", "stroke-width": "1"},
    "proposal": {"stroke": "#00c000", "fill": "none", "stroke-width": "1"},
    "detection": {"stroke": "#ff3030", "fill": "none", "stroke-width": "2"},
    "ignore": {"stroke": "#808080", "fill": "#808080", "fill-opacity": "0.4", "stroke-width": "1"},
}


@dataclass
class Overlay:
    """One polygon to draw: quad plus a style kind from SVG_STYLES."""

    quad: Quad
    kind: str = "proposal"
    label: Optional[str] = None


def scene_overlays(scene: Scene, cores: bool = True) -> List[Overlay]:
    """GT rects (ignore-flagged ones grey) and, optionally, their cores."""
    out = []
    for inst in scene.instances:
        if inst.ignore:
            out.append(Overlay(inst.rect.quad, "ignore"))
            continue
        out.append(Overlay(inst.rect.quad, "gt", inst.transcription))
        if cores:
            out.append(Overlay(inst.core.quad, "core"))
    return out


def render_svg(
    size: Union[Scene, Tuple[int, int]],
    overlays: Sequence[Overlay] = (),
    image_href: Optional[str] = None,
) -> str:
    """
    Build an image-sized SVG with one polygon per overlay.

    Args:
        size: a Scene or (H, W)
        overlays: polygons to draw
        image_href: optional background image reference

    Returns:
        SVG document text
    """
    h, w = size.size if isinstance(size, Scene) else size
    root = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "xmlns:xlink": "http://www.w3.org/1999/xlink",
        "width": str(w), "height": str(h), "viewBox": f"0 0 {w} {h}",
    })
    if image_href is not None:
        ET.SubElement(root, "image", {"xlink:href": image_href, "x": "0", "y": "0", "width": str(w), "height": str(h)})
    for ov in overlays:
        if ov.kind not in SVG_STYLES:
            raise ValueError(f"Unknown overlay kind {ov.kind!r}")
        attrs = {"points": " ".join(f"{x:.2f},{y:.2f}" for x, y in ov.quad.vertices), "class": ov.kind}
        attrs.update(SVG_STYLES[ov.kind])
        poly = ET.SubElement(root, "polygon", attrs)
        if ov.label:
            ET.SubElement(poly, "title").text = ov.label
    return ET.tostring(root, encoding="unicode")
