#!/usr/bin/env python3
"""
Sliding-Point Label Generation.

This module implements:
- PyramidSpec / LevelSpec: strides, scale groups and regression norms
- TextInstance: a ground-truth quad with its enclosing rect and core region
- Sliding-point mapping (cell centers in image pixels)
- Scale-friendly assignment of instances to pyramid levels
- Offset encoding/decoding against the four rectangle vertices
- generate_labels(): per-level class, target and instance-id grids
- check_scale_rule(): static report of lower bound / stride per level

Label values:
    POSITIVE = 1   inside the core of an instance assigned to the level
    NEGATIVE = 0   outside every ground-truth rectangle
    IGNORE   = -1  "don't care": excluded from the classification loss
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scripts.errors import InvalidNorm
from scripts.geometry import (
    OrientedRect,
    Point2,
    Quad,
    canonicalize,
    canonicalize_batch,
    min_enclosing_rect,
    points_in_convex_polygon,
    shrink_rect,
)

logger = logging.getLogger(__name__)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

OUT_OF_RANGE = -1


@dataclass(frozen=True)
class LevelSpec:
    """
    One pyramid level.

    Attributes:
        name (str): "P2", "P3" or "P4"
        stride (int): feature stride in px
        scale_lo (float): inclusive lower bound on rect shorter side
        scale_hi (float): exclusive upper bound (math.inf for the last level)
        norm (float): regression normalizer in px
    """

    name: str
    stride: int
    scale_lo: float
    scale_hi: float
    norm: float

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"{self.name}: stride must be >= 1, got {self.stride}")
        if not self.norm > 0:
            raise InvalidNorm(f"{self.name}: norm must be > 0, got {self.norm}")
        if not self.scale_lo < self.scale_hi:
            raise ValueError(f"{self.name}: empty scale range [{self.scale_lo}, {self.scale_hi})")

    def contains(self, short_side: float) -> bool:
        return self.scale_lo <= short_side < self.scale_hi

    def grid_shape(self, image_size: Tuple[int, int]) -> Tuple[int, int]:
        h, w = image_size
        return (math.ceil(h / self.stride), math.ceil(w / self.stride))


@dataclass(frozen=True)
class PyramidSpec:
    """Ordered pyramid levels with contiguous half-open scale ranges."""

    levels: Tuple[LevelSpec, ...]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("PyramidSpec needs at least one level")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.stride <= prev.stride:
                raise ValueError(f"strides must increase: {prev.name}={prev.stride}, {cur.name}={cur.stride}")
            if cur.scale_lo != prev.scale_hi:
                raise ValueError(
                    f"scale ranges of {prev.name} and {cur.name} are not contiguous "
                    f"({prev.scale_hi} != {cur.scale_lo})"
                )

    @classmethod
    def default(
        cls,
        rf_p4: float,
        alpha: float = 0.5,
        strides: Sequence[int] = (4, 8, 16),
        bounds: Sequence[float] = (4.0, 24.0, 48.0),
        norms: Sequence[float] = (24.0, 48.0),
        norm_p4: Optional[float] = None,
    ) -> "PyramidSpec":
        """
        Build the three-level P2/P3/P4 pyramid.

        Args:
            rf_p4: receptive field of the P4 head in px
            alpha: proportion of rf_p4 used as the P4 norm
            strides: strides of P2, P3, P4
            bounds: lower bounds of the three scale groups
            norms: norms of P2 and P3 (upper bounds of their groups)
            norm_p4: explicit P4 norm, replacing alpha * rf_p4
        """
        his = list(bounds[1:]) + [math.inf]
        level_norms = list(norms) + [alpha * rf_p4 if norm_p4 is None else norm_p4]
        return cls(tuple(
            LevelSpec(f"P{i + 2}", int(s), float(lo), float(hi), float(n))
            for i, (s, lo, hi, n) in enumerate(zip(strides, bounds, his, level_norms))
        ))

    @property
    def names(self) -> List[str]:
        return [lvl.name for lvl in self.levels]

    @property
    def min_short_side(self) -> float:
        return self.levels[0].scale_lo

    def index(self, name: str) -> int:
        for i, lvl in enumerate(self.levels):
            if lvl.name == name:
                return i
        raise KeyError(f"Unknown pyramid level: {name}")

    def level_for_short_side(self, short_side: float) -> int:
        for i, lvl in enumerate(self.levels):
            if lvl.contains(short_side):
                return i
        return OUT_OF_RANGE


@dataclass
class TextInstance:
    """
    A ground-truth text instance.

    Attributes:
        quad (Quad): annotated polygon (canonical order)
        rect (OrientedRect): minimum enclosing rectangle of quad
        core (OrientedRect): rect shrunk to the core text region
        ignore (bool): annotator "don't care" flag
        transcription (Optional[str]): text content, if known
        script (Optional[str]): script metadata from the annotation
    """

    quad: Quad
    rect: OrientedRect
    core: OrientedRect
    ignore: bool = False
    transcription: Optional[str] = None
    script: Optional[str] = None

    @classmethod
    def from_quad(
        cls,
        quad: Quad,
        ignore: bool = False,
        transcription: Optional[str] = None,
        script: Optional[str] = None,
        short_factor: float = 0.5,
        long_factor: float = 0.8,
    ) -> "TextInstance":
        rect = min_enclosing_rect(quad)
        core = shrink_rect(rect, short_factor, long_factor)
        return cls(quad, rect, core, ignore, transcription, script)

    @property
    def short_side(self) -> float:
        return self.rect.short_side


@dataclass
class LevelLabels:
    """Label grids for one pyramid level."""

    level: LevelSpec
    classes: np.ndarray
    targets: np.ndarray
    instance_ids: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self.classes == label))


@dataclass
class LabelMap:
    """
    Per-level label grids for one image.

    Attributes:
        image_size (Tuple[int, int]): (H, W) in px
        levels (Dict[str, LevelLabels]): keyed by level name, pyramid order
    """

    image_size: Tuple[int, int]
    levels: Dict[str, LevelLabels] = field(default_factory=dict)

    def __getitem__(self, name: str) -> LevelLabels:
        return self.levels[name]

    def positive_count(self) -> int:
        return sum(lv.count(POSITIVE) for lv in self.levels.values())


# ==================== Sliding points ====================


def map_sliding_point(
    level: LevelSpec,
    row: int,
    col: int,
    grid_shape: Tuple[int, int],
) -> Point2:
    """
    Image-pixel location of a feature cell (cell-center convention).

    Args:
        level: pyramid level
        row, col: cell indices
        grid_shape: (H, W) of the level grid

    Returns:
        Point2 at ((col + 0.5) * stride, (row + 0.5) * stride)

    Raises:
        IndexError: indices outside the grid
    """
    if row < 0 or col < 0 or row >= grid_shape[0] or col >= grid_shape[1]:
        raise IndexError(f"{level.name} cell ({row}, {col}) is outside grid {grid_shape}")
    s = level.stride
    return Point2(col * s + s / 2.0, row * s + s / 2.0)


def sliding_points(level: LevelSpec, grid_shape: Tuple[int, int]) -> np.ndarray:
    """All sliding points of a level as an (H, W, 2) array of (x, y)."""
    h, w = grid_shape
    s = level.stride
    xs = np.arange(w, dtype=np.float64) * s + s / 2.0
    ys = np.arange(h, dtype=np.float64) * s + s / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def assign_scale_group(inst: TextInstance, spec: PyramidSpec) -> int:
    """
    Pick the level whose scale range holds the instance's shorter side.

    Returns:
        Level index into spec.levels, or OUT_OF_RANGE for text below the
        smallest group (such instances are ignored on every level)
    """
    return spec.level_for_short_side(inst.rect.short_side)


# ==================== Offset coding ====================


def _check_norm(norm: float):
    if not norm > 0:
        raise InvalidNorm(f"norm must be > 0, got {norm}")


def encode_targets(p_t: Point2, rect, norm: float) -> np.ndarray:
    """
    Normalized offsets from a sliding point to the rectangle vertices.

    Args:
        p_t: sliding point
        rect: OrientedRect or Quad (canonical vertex order)
        norm: level normalizer

    Returns:
        (8,) array (dx1, dy1, ..., dx4, dy4)

    Raises:
        InvalidNorm: norm <= 0
    """
    _check_norm(norm)
    v = rect.vertices
    return ((v - np.array([p_t.x, p_t.y])) / norm).reshape(8)


def decode_targets(p_t: Point2, offsets: Sequence[float], norm: float) -> Quad:
    """
    Inverse of encode_targets().

    Raises:
        InvalidNorm: norm <= 0
        DegenerateQuad: the decoded polygon has no area or self-intersects
    """
    _check_norm(norm)
    d = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    return canonicalize(np.array([p_t.x, p_t.y]) + norm * d)


def decode_targets_batch(points: np.ndarray, offsets: np.ndarray, norm: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized decode for dense maps.

    Args:
        points: (M, 2) sliding points
        offsets: (M, 8) normalized offsets
        norm: level normalizer

    Returns:
        (canonical vertices (M, 4, 2), valid mask (M,))
    """
    _check_norm(norm)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    d = np.asarray(offsets, dtype=np.float64).reshape(-1, 4, 2)
    return canonicalize_batch(pts + norm * d)


# ==================== Label maps ====================


def _candidate_cells(rect: OrientedRect, stride: int, grid_shape: Tuple[int, int]):
    """Row/col slices of cells whose centers may fall inside rect."""
    v = rect.vertices
    h, w = grid_shape
    c0 = max(0, int(math.floor(v[:, 0].min() / stride - 0.5)) - 1)
    c1 = min(w, int(math.ceil(v[:, 0].max() / stride - 0.5)) + 2)
    r0 = max(0, int(math.floor(v[:, 1].min() / stride - 0.5)) - 1)
    r1 = min(h, int(math.ceil(v[:, 1].max() / stride - 0.5)) + 2)
    if c0 >= c1 or r0 >= r1:
        return None
    return slice(r0, r1), slice(c0, c1)


def generate_labels(
    instances: Sequence[TextInstance],
    image_size: Tuple[int, int],
    spec: PyramidSpec,
) -> LabelMap:
    """
    Build per-level labels for one image.

    A cell is POSITIVE when its sliding point is inside the core of an
    instance assigned to that level; overlapping cores go to the instance
    whose rect center is nearest (lower index on ties). A cell that is not
    POSITIVE but lies inside the rectangle of any instance (own-level
    outside the core, other-level, ignore-flagged or out of range) is
    IGNORE. Everything else is NEGATIVE.

    Args:
        instances: ground-truth instances
        image_size: (H, W) in px
        spec: pyramid levels

    Returns:
        LabelMap with one LevelLabels per spec level
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError(f"image_size must be positive, got {image_size}")

    groups = [assign_scale_group(inst, spec) for inst in instances]
    label_map = LabelMap(image_size=(int(h), int(w)))

    for li, level in enumerate(spec.levels):
        grid = level.grid_shape(image_size)
        pts = sliding_points(level, grid)
        ignore_mask = np.zeros(grid, dtype=bool)
        best_id = np.full(grid, -1, dtype=np.int64)
        best_dist = np.full(grid, np.inf)

        for idx, (inst, group) in enumerate(zip(instances, groups)):
            window = _candidate_cells(inst.rect, level.stride, grid)
            if window is None:
                continue
            rs, cs = window
            local = pts[rs, cs].reshape(-1, 2)
            local_shape = (rs.stop - rs.start, cs.stop - cs.start)
            in_rect = points_in_convex_polygon(local, inst.rect).reshape(local_shape)
            if inst.ignore or group != li:
                ignore_mask[rs, cs] |= in_rect
                continue
            in_core = points_in_convex_polygon(local, inst.core).reshape(local_shape)
            ignore_mask[rs, cs] |= in_rect & ~in_core
            c = inst.rect.center
            d2 = (local[:, 0] - c.x) ** 2 + (local[:, 1] - c.y) ** 2
            d2 = d2.reshape(local_shape)
            win_dist = best_dist[rs, cs]
            take = in_core & (d2 < win_dist)
            best_dist[rs, cs] = np.where(take, d2, win_dist)
            best_id[rs, cs] = np.where(take, idx, best_id[rs, cs])

        positive = best_id >= 0
        classes = np.full(grid, NEGATIVE, dtype=np.int8)
        classes[ignore_mask] = IGNORE
        classes[positive] = POSITIVE

        targets = np.zeros(grid + (8,), dtype=np.float64)
        rows, cols = np.nonzero(positive)
        if rows.size:
            verts = np.stack([instances[i].rect.vertices for i in best_id[rows, cols]])
            origin = pts[rows, cols][:, None, :]
            targets[rows, cols] = ((verts - origin) / level.norm).reshape(-1, 8)

        label_map.levels[level.name] = LevelLabels(level, classes, targets, best_id)

    logger.debug(
        f"Labels for {len(instances)} instances: "
        + ", ".join(f"{n}={lv.count(POSITIVE)}+/{lv.count(IGNORE)}?" for n, lv in label_map.levels.items())
    )
    return label_map


def class_grid_to_pgm(classes: np.ndarray) -> np.ndarray:
    """Map a class grid to 8-bit gray: 0 negative, 128 ignore, 255 positive."""
    out = np.zeros(classes.shape, dtype=np.uint8)
    out[classes == IGNORE] = 128
    out[classes == POSITIVE] = 255
    return out


def check_scale_rule(spec: PyramidSpec, min_feature_px: float = 3.0) -> List[Dict]:
    """
    Report how many feature cells the smallest text of each group spans.

    Every group's lower bound divided by its stride should reach
    min_feature_px; the smallest group is reported but exempt.

    Returns:
        One dict per level: level, stride, lower_bound, ratio, satisfied, exempt
    """
    rows = []
    for i, lvl in enumerate(spec.levels):
        ratio = lvl.scale_lo / lvl.stride
        rows.append({
            "level": lvl.name,
            "stride": lvl.stride,
            "lower_bound": lvl.scale_lo,
            "ratio": ratio,
            "satisfied": ratio >= min_feature_px,
            "exempt": i == 0,
        })
    return rows
