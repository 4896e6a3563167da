#!/usr/bin/env python3
"""
Polygon and Oriented-Rectangle Geometry.

This module provides:
- Point2 / AABB / Quad / OrientedRect value types
- canonicalize(): fixed vertex order for regression targets
- Convex polygon area, containment and clipping (Sutherland-Hodgman)
- Quadrilateral and axis-aligned IoU
- Minimum-area enclosing rectangles (rotating calipers)
- Core-region shrinking

Coordinate frame: x to the right, y downward, origin at the top-left
pixel corner. All values are continuous pixel units.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from scripts.errors import DegenerateQuad, InvalidFactor

logger = logging.getLogger(__name__)

MIN_QUAD_AREA = 1e-6
RIGHT_ANGLE_TOL = 1e-6
SIDE_TOL = 1e-6
BOUNDARY_TOL = 1e-9

PolygonLike = Union["Quad", np.ndarray, Sequence[Sequence[float]]]


@dataclass(frozen=True)
class Point2:
    """A point in image pixels."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point2 requires finite coordinates, got ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class AABB:
    """Axis-aligned box (xmin, ymin, xmax, ymax)."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"Inverted AABB: {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point2:
        return Point2(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


class Quad:
    """
    Four-vertex polygon in canonical order.

    Instances are normally built with canonicalize(); the constructor
    trusts its input order. The vertex array is read-only.

    Attributes:
        vertices (np.ndarray): (4, 2) float64 array, clockwise on screen
    """

    __slots__ = ("_vertices",)

    def __init__(self, vertices: PolygonLike):
        arr = np.array(_as_points(vertices), dtype=np.float64).reshape(4, 2)
        arr.setflags(write=False)
        self._vertices = arr

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Quad":
        """Canonicalize a flat [x1, y1, ..., x4, y4] list into a Quad."""
        if len(values) != 8:
            raise ValueError(f"Expected 8 coordinates, got {len(values)}")
        return canonicalize(np.asarray(values, dtype=np.float64).reshape(4, 2))

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def area(self) -> float:
        return polygon_area(self._vertices)

    def points(self) -> List[Point2]:
        return [Point2(float(x), float(y)) for x, y in self._vertices]

    def flat(self) -> List[float]:
        return [float(v) for v in self._vertices.reshape(-1)]

    def scaled(self, factor: float) -> "Quad":
        return canonicalize(self._vertices * factor)

    def __eq__(self, other) -> bool:
        return isinstance(other, Quad) and np.array_equal(self._vertices, other._vertices)

    def __hash__(self) -> int:
        return hash(self._vertices.tobytes())

    def __repr__(self) -> str:
        pts = ", ".join(f"({x:g},{y:g})" for x, y in self._vertices)
        return f"Quad({pts})"


class OrientedRect:
    """
    A Quad whose interior angles are right angles.

    Attributes:
        quad (Quad): canonical vertices
        center (Point2): rectangle center
        long_side (float): length of the long side (edge v1->v2 on ties)
        short_side (float): length of the short side
    """

    __slots__ = ("quad", "_edge_a", "_edge_b")

    def __init__(self, quad: Quad):
        v = quad.vertices
        for i in range(4):
            e1 = v[(i + 1) % 4] - v[i]
            e2 = v[(i + 2) % 4] - v[(i + 1) % 4]
            n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
            if n1 == 0.0 or n2 == 0.0:
                raise DegenerateQuad("rectangle has a zero-length side")
            if abs(float(np.dot(e1, e2))) / (n1 * n2) > RIGHT_ANGLE_TOL:
                raise ValueError(f"{quad!r} is not a rectangle")
        a = float(np.linalg.norm(v[1] - v[0]))
        b = float(np.linalg.norm(v[2] - v[1]))
        if abs(a - float(np.linalg.norm(v[2] - v[3]))) > SIDE_TOL * max(1.0, a) or \
                abs(b - float(np.linalg.norm(v[3] - v[0]))) > SIDE_TOL * max(1.0, b):
            raise ValueError(f"{quad!r} has unequal opposite sides")
        self.quad = quad
        self._edge_a = a
        self._edge_b = b

    @property
    def vertices(self) -> np.ndarray:
        return self.quad.vertices

    @property
    def center(self) -> Point2:
        c = self.quad.vertices.mean(axis=0)
        return Point2(float(c[0]), float(c[1]))

    @property
    def long_side(self) -> float:
        return max(self._edge_a, self._edge_b)

    @property
    def short_side(self) -> float:
        return min(self._edge_a, self._edge_b)

    @property
    def area(self) -> float:
        return self._edge_a * self._edge_b

    def __repr__(self) -> str:
        c = self.center
        return (f"OrientedRect(center=({c.x:g},{c.y:g}), "
                f"long={self.long_side:g}, short={self.short_side:g})")


# ==================== Polygon primitives ====================


def _as_points(poly: PolygonLike) -> np.ndarray:
    if isinstance(poly, Quad):
        return poly.vertices
    if isinstance(poly, OrientedRect):
        return poly.vertices
    arr = np.asarray(poly, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 2)
    return arr


def signed_area(poly: PolygonLike) -> float:
    """Shoelace area; positive for the canonical (screen-clockwise) winding."""
    p = _as_points(poly)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly: PolygonLike) -> float:
    """
    Area of a simple polygon.

    Args:
        poly: Quad, OrientedRect or (k, 2) vertex array

    Returns:
        Non-negative area in px^2
    """
    return abs(signed_area(poly))


def _oriented(points: np.ndarray) -> np.ndarray:
    return points[::-1].copy() if signed_area(points) < 0 else points


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _on_segment(p, q, r) -> bool:
    return (min(p[0], r[0]) <= q[0] <= max(p[0], r[0])
            and min(p[1], r[1]) <= q[1] <= max(p[1], r[1]))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    if d1 == 0 and _on_segment(p3, p1, p4):
        return True
    if d2 == 0 and _on_segment(p3, p2, p4):
        return True
    if d3 == 0 and _on_segment(p1, p3, p2):
        return True
    if d4 == 0 and _on_segment(p1, p4, p2):
        return True
    return False


def _canonical_start(points: np.ndarray) -> int:
    keys = [(p[0] + p[1], p[1], p[0]) for p in points]
    return min(range(len(points)), key=lambda i: keys[i])


def canonicalize(vertices: PolygonLike) -> Quad:
    """
    Put four vertices into canonical order.

    Canonical order is clockwise on screen (positive shoelace area with
    y pointing down), starting from the vertex with the smallest x+y;
    ties go to the smaller y, then the smaller x.

    Args:
        vertices: four points in any cyclic order and either winding

    Returns:
        Quad in canonical order

    Raises:
        DegenerateQuad: non-finite, self-intersecting or zero-area input

    Example:
        >>> canonicalize([(0, 0), (0, 2), (2, 2), (2, 0)]).flat()
        [0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0]
    """
    pts = np.array(_as_points(vertices), dtype=np.float64)
    if pts.shape != (4, 2):
        raise DegenerateQuad(f"expected 4 vertices, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateQuad("non-finite vertex coordinates")
    if _segments_intersect(pts[0], pts[1], pts[2], pts[3]) or \
            _segments_intersect(pts[1], pts[2], pts[3], pts[0]):
        raise DegenerateQuad("self-intersecting quadrilateral")
    area = signed_area(pts)
    if abs(area) < MIN_QUAD_AREA:
        raise DegenerateQuad(f"quadrilateral area {abs(area):.3g} px^2 is below {MIN_QUAD_AREA}")
    if area < 0:
        pts = pts[::-1]
    start = _canonical_start(pts)
    return Quad(np.roll(pts, -start, axis=0))


def canonicalize_batch(vertices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized canonicalize() over many quads.

    Args:
        vertices: (M, 4, 2) array

    Returns:
        Tuple of (canonical vertices (M, 4, 2), valid mask (M,)); rows
        that canonicalize() would reject are flagged invalid and left as-is
    """
    v = np.asarray(vertices, dtype=np.float64)
    m = v.shape[0]
    if m == 0:
        return v.reshape(0, 4, 2), np.zeros(0, dtype=bool)
    x, y = v[..., 0], v[..., 1]
    area = 0.5 * (np.sum(x * np.roll(y, -1, axis=1), axis=1) - np.sum(np.roll(x, -1, axis=1) * y, axis=1))
    finite = np.all(np.isfinite(v.reshape(m, -1)), axis=1)
    valid = finite & (np.abs(area) >= MIN_QUAD_AREA)

    def cross(o, a, b):
        return (a[:, 0] - o[:, 0]) * (b[:, 1] - o[:, 1]) - (a[:, 1] - o[:, 1]) * (b[:, 0] - o[:, 0])

    for i, j, k, l in ((0, 1, 2, 3), (1, 2, 3, 0)):
        p1, p2, p3, p4 = v[:, i], v[:, j], v[:, k], v[:, l]
        d1, d2 = cross(p3, p4, p1), cross(p3, p4, p2)
        d3, d4 = cross(p1, p2, p3), cross(p1, p2, p4)
        crossing = (d1 * d2 <= 0) & (d3 * d4 <= 0)
        # Collinear-but-disjoint edges satisfy the sign test; they cannot occur
        # once the area check has passed, so the mask stays conservative.
        valid &= ~crossing

    out = np.where((area < 0)[:, None, None], v[:, ::-1, :], v)
    keys = (out[..., 0], out[..., 1], out[..., 0] + out[..., 1])
    start = np.lexsort(keys, axis=-1)[:, 0]
    idx = (start[:, None] + np.arange(4)[None, :]) % 4
    out = np.take_along_axis(out, idx[:, :, None], axis=1)
    return out, valid


def aabb(q: PolygonLike) -> AABB:
    """Tight axis-aligned bounds of a polygon."""
    p = _as_points(q)
    lo = p.min(axis=0)
    hi = p.max(axis=0)
    return AABB(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def is_convex(poly: PolygonLike) -> bool:
    p = _oriented(_as_points(poly))
    n = len(p)
    for i in range(n):
        if _cross(p[i], p[(i + 1) % n], p[(i + 2) % n]) < -BOUNDARY_TOL:
            return False
    return True


def convex_hull(poly: PolygonLike) -> np.ndarray:
    """Convex hull vertices, positively oriented."""
    p = _as_points(poly)
    try:
        hull = ConvexHull(p)
    except QhullError as e:
        raise DegenerateQuad(f"convex hull failed: {e}") from e
    return _oriented(p[hull.vertices])


def points_in_convex_polygon(points: np.ndarray, poly: PolygonLike) -> np.ndarray:
    """
    Boundary-inclusive containment test for many points.

    Args:
        points: (P, 2) array
        poly: convex polygon

    Returns:
        (P,) boolean mask
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    p = _oriented(_as_points(poly))
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(p)):
        a = p[i]
        e = p[(i + 1) % len(p)] - a
        length = float(np.hypot(e[0], e[1]))
        cross = e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])
        inside &= cross >= -BOUNDARY_TOL * max(length, 1.0)
    return inside


def point_in_polygon(p: Union[Point2, Sequence[float]], poly: PolygonLike) -> bool:
    """True iff p lies inside the convex polygon or on its boundary."""
    xy = p.as_array() if isinstance(p, Point2) else np.asarray(p, dtype=np.float64)
    return bool(points_in_convex_polygon(xy.reshape(1, 2), poly)[0])


def intersect_convex(a: PolygonLike, b: PolygonLike) -> np.ndarray:
    """
    Intersection of two convex polygons (Sutherland-Hodgman).

    Args:
        a: subject polygon
        b: clip polygon

    Returns:
        (k, 2) vertex array; shape (0, 2) when the overlap has no area
    """
    subject = _oriented(_as_points(a))
    clip = _oriented(_as_points(b))
    output = [pt for pt in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        cp, cq = clip[i], clip[(i + 1) % n]
        edge = cq - cp
        candidates = output
        output = []

        def side(pt):
            return edge[0] * (pt[1] - cp[1]) - edge[1] * (pt[0] - cp[0])

        for j in range(len(candidates)):
            cur = candidates[j]
            prev = candidates[j - 1]
            s_cur, s_prev = side(cur), side(prev)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append(prev + t * (cur - prev))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append(prev + t * (cur - prev))
    if len(output) < 3:
        return np.empty((0, 2), dtype=np.float64)
    result = np.array(output, dtype=np.float64)
    if polygon_area(result) <= 0.0:
        return np.empty((0, 2), dtype=np.float64)
    return result


def _convex_view(poly: PolygonLike) -> np.ndarray:
    p = _as_points(poly)
    return p if is_convex(p) else convex_hull(p)


def iou_quad(a: PolygonLike, b: PolygonLike) -> float:
    """
    Polygon IoU of two quadrilaterals.

    Non-convex inputs are replaced by their convex hulls; for convex
    quads the result is exact up to floating point.

    Returns:
        IoU in [0, 1]
    """
    pa, pb = _convex_view(a), _convex_view(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    # Disjoint bounding boxes: no overlap.
    if pa[:, 0].max() <= pb[:, 0].min() or pb[:, 0].max() <= pa[:, 0].min() or \
            pa[:, 1].max() <= pb[:, 1].min() or pb[:, 1].max() <= pa[:, 1].min():
        return 0.0
    inter = polygon_area(intersect_convex(pa, pb))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def iou_aabb(a: AABB, b: AABB) -> float:
    """IoU of two axis-aligned boxes; zero-area overlaps give 0."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def aabb_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two sets of (xmin, ymin, xmax, ymax) rows.

    Returns:
        (len(a), len(b)) matrix
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


# ==================== Rectangles ====================


def make_rect(cx: float, cy: float, width: float, height: float, angle_deg: float = 0.0) -> OrientedRect:
    """
    Build a rectangle from center, side lengths and rotation.

    Args:
        cx, cy: center in px
        width: side length along the rotated x axis
        height: side length along the rotated y axis
        angle_deg: rotation, positive turns x toward y (clockwise on screen)
    """
    theta = math.radians(angle_deg)
    u = np.array([math.cos(theta), math.sin(theta)])
    w = np.array([-math.sin(theta), math.cos(theta)])
    c = np.array([cx, cy], dtype=np.float64)
    hw, hh = 0.5 * width, 0.5 * height
    pts = np.stack([c - hw * u - hh * w, c + hw * u - hh * w, c + hw * u + hh * w, c - hw * u + hh * w])
    return OrientedRect(canonicalize(pts))


def min_enclosing_rect(q: PolygonLike) -> OrientedRect:
    """
    Minimum-area oriented rectangle containing a polygon.

    Rotating calipers over the convex hull: one of the optimal
    rectangle's sides is collinear with a hull edge, so every hull edge
    direction is tried and the smallest box is kept (first on ties).

    Args:
        q: valid quadrilateral (or any polygon)

    Returns:
        Canonicalized OrientedRect

    Raises:
        DegenerateQuad: the polygon has no area
    """
    hull = convex_hull(q)
    best = None
    n = len(hull)
    for i in range(n):
        edge = hull[(i + 1) % n] - hull[i]
        length = float(np.hypot(edge[0], edge[1]))
        if length == 0.0:
            continue
        u = edge / length
        w = np.array([-u[1], u[0]])
        pu = hull @ u
        pw = hull @ w
        area = (pu.max() - pu.min()) * (pw.max() - pw.min())
        if best is None or area < best[0] - 1e-12 * max(1.0, best[0]):
            best = (area, u, w, pu.min(), pu.max(), pw.min(), pw.max())
    if best is None:
        raise DegenerateQuad("polygon has no non-zero edge")
    _, u, w, u0, u1, w0, w1 = best
    corners = np.stack([u0 * u + w0 * w, u1 * u + w0 * w, u1 * u + w1 * w, u0 * u + w1 * w])
    return OrientedRect(canonicalize(corners))


def shrink_rect(r: OrientedRect, short_factor: float = 0.5, long_factor: float = 0.8) -> OrientedRect:
    """
    Shrink a rectangle about its center to get the core text region.

    Args:
        r: ground-truth rectangle
        short_factor: scale applied to the short side
        long_factor: scale applied to the long side

    Returns:
        Rectangle with the same center and orientation

    Raises:
        InvalidFactor: a factor is outside (0, 1]
    """
    for name, f in (("short_factor", short_factor), ("long_factor", long_factor)):
        if not (0.0 < f <= 1.0):
            raise InvalidFactor(f"{name} must be in (0, 1], got {f}")
    v = r.vertices
    c = v.mean(axis=0)
    ea = v[1] - v[0]
    eb = v[2] - v[1]
    a = float(np.linalg.norm(ea))
    b = float(np.linalg.norm(eb))
    u, w = ea / a, eb / b
    # Edge v1->v2 counts as the long side on ties.
    fa, fb = (long_factor, short_factor) if a >= b else (short_factor, long_factor)
    ha, hb = 0.5 * a * fa, 0.5 * b * fb
    pts = np.stack([c - ha * u - hb * w, c + ha * u - hb * w, c + ha * u + hb * w, c - ha * u + hb * w])
    return OrientedRect(canonicalize(pts))


def quads_to_array(quads: Iterable[PolygonLike]) -> np.ndarray:
    """Stack polygons into an (M, 4, 2) array."""
    rows = [_as_points(q) for q in quads]
    if not rows:
        return np.empty((0, 4, 2), dtype=np.float64)
    return np.stack(rows).astype(np.float64)
