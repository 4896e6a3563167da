#!/usr/bin/env python3
"""
Proposal Decoding, Selection and Second-Stage Labels.

This module implements:
- decode_dense(): dense head outputs -> scored quadrilateral proposals
- nms(): greedy suppression with axis-aligned or polygon IoU
- select_for_stage2(): top-N1 per module -> NMS -> top-N2
- route_proposals(): scale-friendly routing of proposals to light heads
- assign_stage2_labels(): positive / negative / excluded by AABB IoU
- Stage-2 offset encoding normalized by proposal width and height
- skewed_nms(): final-detection NMS on true quadrilateral IoU

Selection Pipeline:
1. Threshold dense textness at score_floor, decode offsets at sliding points
2. Keep the N1 best per detection module
3. Pool and run NMS (IoU 0.7, axis-aligned)
4. Keep the N2 best
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from scripts.errors import DegenerateQuad
from scripts.geometry import AABB, Quad, aabb, aabb_iou_matrix, canonicalize, canonicalize_batch, iou_quad, min_enclosing_rect
from scripts.labeling import OUT_OF_RANGE, PyramidSpec, TextInstance, assign_scale_group, decode_targets_batch, sliding_points

logger = logging.getLogger(__name__)

STAGE2_POSITIVE = 1
STAGE2_NEGATIVE = 0
STAGE2_EXCLUDED = -1


@dataclass
class Proposal:
    """
    Scored quadrilateral from one detection module.

    Attributes:
        quad (Quad): canonical vertices
        score (float): softmax textness in [0, 1]
        level (str): source pyramid level
        aabb (AABB): cached axis-aligned bounds
    """

    quad: Quad
    score: float
    level: str
    aabb: AABB = field(init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite proposal score {self.score}")
        self.aabb = aabb(self.quad)

    def to_dict(self) -> Dict:
        return {"quad": self.quad.flat(), "score": float(self.score), "level": self.level}

    @classmethod
    def from_dict(cls, data: Dict) -> "Proposal":
        return cls(Quad.from_flat(data["quad"]), float(data["score"]), data.get("level", "P2"))


@dataclass
class Detection:
    """Final scored quadrilateral after the second stage."""

    quad: Quad
    score: float
    level: Optional[str] = None
    aabb: AABB = field(init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")
        self.aabb = aabb(self.quad)

    def to_dict(self) -> Dict:
        out = {"quad": self.quad.flat(), "score": float(self.score)}
        if self.level is not None:
            out["level"] = self.level
        return out

    @classmethod
    def from_dict(cls, data: Dict) -> "Detection":
        return cls(Quad.from_flat(data["quad"]), float(data["score"]), data.get("level"))


@dataclass
class Stage2Label:
    """
    Training label of one proposal for its light head.

    Attributes:
        label (int): STAGE2_POSITIVE, STAGE2_NEGATIVE or STAGE2_EXCLUDED
        gt_index (int): matched instance (-1 when not positive)
        max_iou (float): best AABB IoU over all instances
        targets (Optional[np.ndarray]): (8,) offsets for positives
    """

    label: int
    gt_index: int
    max_iou: float
    targets: Optional[np.ndarray] = None


# ==================== Dense decoding ====================


def textness(scores: np.ndarray) -> np.ndarray:
    """Softmax probability of the text class from N x 2 x H x W logits."""
    return softmax(scores, axis=1)[:, 1]


def decode_dense(outputs, spec: PyramidSpec, score_floor: float = 0.1, image_index: int = 0) -> Dict[str, List[Proposal]]:
    """
    Decode every cell whose textness reaches score_floor.

    Args:
        outputs: AfrpnOutputs from the model
        spec: pyramid levels (norms and strides)
        score_floor: minimum textness probability
        image_index: which image of the batch to decode

    Returns:
        Mapping level name -> proposals in row-major cell order;
        degenerate decodes are dropped
    """
    per_level: Dict[str, List[Proposal]] = {}
    dropped = 0
    for level in spec.levels:
        scores = outputs.scores[level.name][image_index:image_index + 1]
        offsets = outputs.offsets[level.name][image_index]
        prob = textness(scores)[0]
        rows, cols = np.nonzero(prob >= score_floor)
        if rows.size == 0:
            per_level[level.name] = []
            continue
        pts = sliding_points(level, prob.shape)[rows, cols]
        deltas = offsets[:, rows, cols].T
        verts, valid = decode_targets_batch(pts, deltas, level.norm)
        dropped += int((~valid).sum())
        per_level[level.name] = [
            Proposal(Quad(verts[i]), float(prob[rows[i], cols[i]]), level.name)
            for i in np.flatnonzero(valid)
        ]
    if dropped:
        logger.debug(f"decode_dense dropped {dropped} degenerate decodes")
    return per_level


# ==================== NMS ====================


def _boxes(items: Sequence) -> np.ndarray:
    return np.array([it.aabb.as_tuple() for it in items], dtype=np.float64).reshape(-1, 4)


def nms(proposals: Sequence, iou_threshold: float = 0.7, mode: str = "aabb") -> List:
    """
    Greedy non-maximum suppression.

    Candidates are visited by descending score (input order on ties); a
    candidate is kept iff its IoU with every kept box is <= iou_threshold.

    Args:
        proposals: Proposal or Detection objects
        iou_threshold: suppression threshold in (0, 1]
        mode: "aabb" for axis-aligned IoU, "quad" for polygon IoU

    Returns:
        Kept items, sorted by descending score
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if mode not in ("aabb", "quad"):
        raise ValueError(f"Unknown NMS mode: {mode}")
    if not proposals:
        return []
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    if mode == "aabb":
        boxes = _boxes(proposals)
        while order.size:
            i = order[0]
            keep.append(i)
            rest = order[1:]
            ious = aabb_iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            order = rest[ious <= iou_threshold]
    else:
        while order.size:
            i = order[0]
            keep.append(i)
            rest = order[1:]
            ious = np.array([iou_quad(proposals[i].quad, proposals[j].quad) for j in rest])
            order = rest[ious <= iou_threshold] if rest.size else rest
    return [proposals[i] for i in keep]


def skewed_nms(detections: Sequence, iou_threshold: float = 0.3) -> List:
    """NMS on quadrilateral IoU for final detections."""
    return nms(detections, iou_threshold, mode="quad")


def top_k(items: Sequence, k: int) -> List:
    scores = np.array([p.score for p in items], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return [items[i] for i in order]


def select_for_stage2(
    per_module_proposals,
    n1: int = 2000,
    n2: int = 300,
    iou_threshold: float = 0.7,
    mode: str = "aabb",
) -> List[Proposal]:
    """
    Pick second-stage proposals.

    Args:
        per_module_proposals: mapping level -> proposals, or a sequence of lists
        n1: proposals kept per module before pooling
        n2: proposals kept after NMS
        iou_threshold: NMS threshold
        mode: NMS IoU mode

    Returns:
        At most n2 proposals with non-increasing scores
    """
    groups = per_module_proposals.values() if isinstance(per_module_proposals, dict) else per_module_proposals
    pooled = []
    for group in groups:
        pooled.extend(top_k(list(group), n1))
    kept = nms(pooled, iou_threshold, mode)
    return kept[:n2]


# ==================== Routing ====================


def route_proposals(proposals: Iterable, spec: PyramidSpec) -> Dict[str, List]:
    """
    Group proposals by the scale range of their enclosing-rect shorter side.

    Proposals below the smallest range go to the first (finest) level.

    Returns:
        Mapping level name -> proposals, every level present
    """
    groups = {name: [] for name in spec.names}
    for p in proposals:
        try:
            short = min_enclosing_rect(p.quad).short_side
        except DegenerateQuad:
            short = 0.0
        li = spec.level_for_short_side(short)
        if li == OUT_OF_RANGE:
            li = 0
        groups[spec.levels[li].name].append(p)
    return groups


# ==================== Second-stage labels ====================


def _center_size(box: AABB) -> Tuple[float, float, float, float]:
    pw = box.xmax - box.xmin
    ph = box.ymax - box.ymin
    if pw <= 0 or ph <= 0:
        raise DegenerateQuad(f"proposal AABB has zero size: {box.as_tuple()}")
    return 0.5 * (box.xmin + box.xmax), 0.5 * (box.ymin + box.ymax), pw, ph


def encode_stage2(box: AABB, vertices: np.ndarray) -> np.ndarray:
    """Offsets from the AABB center to four vertices, scaled by 1/width and 1/height."""
    px, py, pw, ph = _center_size(box)
    v = np.asarray(vertices, dtype=np.float64).reshape(4, 2)
    return ((v - np.array([px, py])) / np.array([pw, ph])).reshape(8)


def decode_stage2(proposal, offsets: Sequence[float]) -> Quad:
    """
    Inverse of encode_stage2() relative to the proposal's AABB.

    Raises:
        DegenerateQuad: zero-size proposal or zero-area decode
    """
    box = proposal.aabb if hasattr(proposal, "aabb") else proposal
    px, py, pw, ph = _center_size(box)
    d = np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    return canonicalize(np.array([px, py]) + d * np.array([pw, ph]))


def decode_stage2_batch(boxes: np.ndarray, offsets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized decode_stage2 over (R, 4) boxes; returns (vertices, valid)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    size = np.stack([b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)
    center = 0.5 * (b[:, :2] + b[:, 2:])
    verts = center[:, None, :] + np.asarray(offsets, dtype=np.float64).reshape(-1, 4, 2) * size[:, None, :]
    out, valid = canonicalize_batch(verts)
    return out, valid & np.all(size > 0, axis=1)


def assign_stage2_labels(
    proposals: Sequence,
    instances: Sequence[TextInstance],
    spec: Optional[PyramidSpec] = None,
    level: Optional[str] = None,
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
) -> List[Stage2Label]:
    """
    Label proposals for one light head by AABB IoU with the GT rectangles.

    A proposal is negative when its best IoU is below neg_iou. Otherwise,
    if the best-matching instance is ignore-flagged (or, when `level` is
    given, belongs to another scale group) it is excluded; if its best IoU
    exceeds pos_iou it is positive with targets to that instance's
    rectangle; anything else is excluded.

    Raises:
        DegenerateQuad: a proposal AABB has zero width or height
    """
    if not proposals:
        return []
    boxes = _boxes(proposals)
    for p in proposals:
        _center_size(p.aabb)
    if not instances:
        return [Stage2Label(STAGE2_NEGATIVE, -1, 0.0) for _ in proposals]

    gt_boxes = np.array([aabb(inst.rect).as_tuple() for inst in instances], dtype=np.float64)
    ious = aabb_iou_matrix(boxes, gt_boxes)
    blocked = np.array([inst.ignore for inst in instances], dtype=bool)
    if level is not None and spec is not None:
        li = spec.index(level)
        blocked |= np.array([assign_scale_group(inst, spec) != li for inst in instances], dtype=bool)

    labels = []
    for r, p in enumerate(proposals):
        j = int(np.argmax(ious[r]))
        best = float(ious[r, j])
        if best < neg_iou:
            labels.append(Stage2Label(STAGE2_NEGATIVE, -1, best))
        elif blocked[j] or best <= pos_iou:
            labels.append(Stage2Label(STAGE2_EXCLUDED, -1, best))
        else:
            targets = encode_stage2(p.aabb, instances[j].rect.vertices)
            labels.append(Stage2Label(STAGE2_POSITIVE, j, best, targets))
    return labels
