#!/usr/bin/env python3
"""
Proposal Recall and Detection Metrics.

This module implements:
- recall_at(): fraction of non-ignored GT covered by the top-k proposals
- average_recall(): mean recall over IoU 0.50:0.05:0.95
- detection_prf(): greedy one-to-one precision / recall / F
- RecallReport / build_report(): dataset-level pooled recall table
- scale_sweep(): recall of one detector on progressively downsampled scenes

GT is pooled across images; ignored GT never counts in a denominator.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from scripts.data_io import resize_scene
from scripts.geometry import aabb, aabb_iou_matrix, iou_quad
from scripts.labeling import PyramidSpec, TextInstance

logger = logging.getLogger(__name__)

DEFAULT_KS = (50, 100, 300)
AR_THRESHOLDS = np.linspace(0.5, 0.95, 10)
GROUP_NAMES = ("small", "medium", "large")


@dataclass
class PRF:
    """Detection precision / recall / F with the underlying counts."""

    precision: float
    recall: float
    f: float
    tp: int
    fp: int
    n_gt: int

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.precision, self.recall, self.f


def _iou_matrix(gts: Sequence[TextInstance], items: Sequence, mode: str) -> np.ndarray:
    """IoU of every GT (rows) against every proposal/detection (cols)."""
    if not gts or not items:
        return np.zeros((len(gts), len(items)))
    if mode == "aabb":
        g = np.array([aabb(inst.quad).as_tuple() for inst in gts])
        p = np.array([aabb(it.quad).as_tuple() for it in items])
        return aabb_iou_matrix(g, p)
    if mode == "quad":
        return np.array([[iou_quad(inst.quad, it.quad) for it in items] for inst in gts])
    raise ValueError(f"Unknown IoU mode: {mode}")


def _best_iou(gts: Sequence[TextInstance], proposals: Sequence, k: int, mode: str) -> np.ndarray:
    """Best IoU reached by any of the top-k proposals for every non-ignored GT."""
    targets = [g for g in gts if not g.ignore]
    top = list(proposals[:k])
    m = _iou_matrix(targets, top, mode)
    return m.max(axis=1) if m.shape[1] else np.zeros(len(targets))


def recall_at(gts: Sequence[TextInstance], proposals: Sequence, k: int, iou_t: float = 0.5, mode: str = "aabb") -> float:
    """
    Recall of the top-k proposals at one IoU threshold.

    Args:
        gts: ground-truth instances of one image
        proposals: proposals sorted by score (best first)
        k: number of proposals considered
        iou_t: IoU threshold (inclusive)
        mode: "aabb" or "quad"

    Returns:
        Covered fraction of non-ignored GT; 1.0 when there is none

    Example:
        >>> recall_at(gts, proposals, k=300, iou_t=0.5)
        0.93
    """
    best = _best_iou(gts, proposals, k, mode)
    if best.size == 0:
        return 1.0
    return float(np.mean(best >= iou_t))


def average_recall(gts: Sequence[TextInstance], proposals: Sequence, k: int, mode: str = "aabb") -> float:
    """Mean of recall_at() over the ten thresholds 0.50, 0.55, ..., 0.95."""
    best = _best_iou(gts, proposals, k, mode)
    if best.size == 0:
        return 1.0
    return float(np.mean([np.mean(best >= t) for t in AR_THRESHOLDS]))


def detection_prf(
    detections: Sequence,
    gts: Sequence[TextInstance],
    iou_t: float = 0.5,
    mode: str = "quad",
) -> PRF:
    """
    Greedy one-to-one matching in descending detection score.

    Each detection takes the unmatched non-ignored GT with the highest
    IoU >= iou_t. A detection that matches no such GT but overlaps an
    ignored GT at iou_t counts as neither TP nor FP. Precision with no
    counted detections is 1.0 only when there is also no GT; recall with
    no GT is 1.0.
    """
    dets = sorted(detections, key=lambda d: -d.score)
    m = _iou_matrix(list(gts), dets, mode)
    ignored = np.array([g.ignore for g in gts], dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    tp = fp = 0
    for j in range(len(dets)):
        col = m[:, j].copy()
        col[matched | ignored] = -1.0
        i = int(np.argmax(col)) if col.size else -1
        if i >= 0 and col[i] >= iou_t:
            matched[i] = True
            tp += 1
        elif np.any(m[ignored, j] >= iou_t):
            continue
        else:
            fp += 1
    n_gt = int((~ignored).sum())
    considered = tp + fp
    precision = tp / considered if considered else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRF(precision, recall, f, tp, fp, n_gt)


def pooled_prf(per_image: Sequence[PRF]) -> PRF:
    """Dataset-level PRF from pooled counts."""
    tp = sum(p.tp for p in per_image)
    fp = sum(p.fp for p in per_image)
    n_gt = sum(p.n_gt for p in per_image)
    precision = tp / (tp + fp) if tp + fp else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRF(precision, recall, f, tp, fp, n_gt)


# ==================== Reports ====================


@dataclass
class RecallReport:
    """
    Pooled proposal recall over a dataset.

    Attributes:
        ks (List[int]): proposal counts k
        r50 (Dict[int, float]): recall at IoU 0.5 per k
        r75 (Dict[int, float]): recall at IoU 0.75 per k
        ar (Dict[int, float]): average recall over 0.50:0.05:0.95 per k
        n_gt (int): non-ignored GT
        n_ignored (int): ignored GT
        n_images (int): images evaluated
        group_recall (Dict[str, float]): recall at IoU 0.5 and the largest k per scale group
        mode (str): IoU mode
    """

    ks: List[int]
    r50: Dict[int, float]
    r75: Dict[int, float]
    ar: Dict[int, float]
    n_gt: int
    n_ignored: int
    n_images: int
    group_recall: Dict[str, float] = field(default_factory=dict)
    mode: str = "aabb"

    def to_dict(self) -> Dict:
        return {
            "schema": "afrpn.recall/1",
            "ks": list(self.ks),
            "r50": {str(k): v for k, v in self.r50.items()},
            "r75": {str(k): v for k, v in self.r75.items()},
            "ar": {str(k): v for k, v in self.ar.items()},
            "n_gt": self.n_gt,
            "n_ignored": self.n_ignored,
            "n_images": self.n_images,
            "group_recall": dict(self.group_recall),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RecallReport":
        return cls(
            ks=[int(k) for k in data["ks"]],
            r50={int(k): float(v) for k, v in data["r50"].items()},
            r75={int(k): float(v) for k, v in data["r75"].items()},
            ar={int(k): float(v) for k, v in data["ar"].items()},
            n_gt=int(data["n_gt"]),
            n_ignored=int(data["n_ignored"]),
            n_images=int(data["n_images"]),
            group_recall={str(k): float(v) for k, v in data.get("group_recall", {}).items()},
            mode=data.get("mode", "aabb"),
        )

    def to_table(self) -> pd.DataFrame:
        """One row per k with R@0.5, R@0.75 and AR columns."""
        return pd.DataFrame(
            {"k": self.ks,
             "R_50": [self.r50[k] for k in self.ks],
             "R_75": [self.r75[k] for k in self.ks],
             "AR": [self.ar[k] for k in self.ks]}
        ).set_index("k")

    def format_table(self) -> str:
        return self.to_table().to_string(float_format=lambda v: f"{v:.3f}")


def group_of(inst: TextInstance, spec: Optional[PyramidSpec]) -> Optional[str]:
    """Scale-group name of an instance, or None when below the smallest range."""
    if spec is None:
        bounds = (4.0, 24.0, 48.0)
    else:
        bounds = tuple(lvl.scale_lo for lvl in spec.levels)
    s = inst.short_side
    if s < bounds[0]:
        return None
    for name, lo in reversed(list(zip(GROUP_NAMES, bounds))):
        if s >= lo:
            return name
    return None


def build_report(
    results: Sequence[Tuple[Sequence[TextInstance], Sequence]],
    ks: Sequence[int] = DEFAULT_KS,
    mode: str = "aabb",
    spec: Optional[PyramidSpec] = None,
) -> RecallReport:
    """
    Pool per-image (gts, proposals) pairs into a RecallReport.

    Recall values are covered-GT counts over total non-ignored GT, so
    images with more text weigh more. With no GT at all every recall is 1.
    """
    ks = list(ks)
    covered50 = {k: 0 for k in ks}
    covered75 = {k: 0 for k in ks}
    covered_ar = {k: 0.0 for k in ks}
    group_hit = {g: 0 for g in GROUP_NAMES}
    group_total = {g: 0 for g in GROUP_NAMES}
    n_gt = n_ignored = 0
    kmax = max(ks) if ks else 0
    for gts, proposals in results:
        targets = [g for g in gts if not g.ignore]
        n_ignored += len(gts) - len(targets)
        n_gt += len(targets)
        for k in ks:
            best = _best_iou(gts, proposals, k, mode)
            covered50[k] += int(np.sum(best >= 0.5))
            covered75[k] += int(np.sum(best >= 0.75))
            covered_ar[k] += float(sum(np.sum(best >= t) for t in AR_THRESHOLDS)) / len(AR_THRESHOLDS)
        best = _best_iou(gts, proposals, kmax, mode)
        for inst, b in zip(targets, best):
            g = group_of(inst, spec)
            if g is not None:
                group_total[g] += 1
                group_hit[g] += int(b >= 0.5)

    def frac(x):
        return float(x) / n_gt if n_gt else 1.0

    return RecallReport(
        ks=ks,
        r50={k: frac(covered50[k]) for k in ks},
        r75={k: frac(covered75[k]) for k in ks},
        ar={k: frac(covered_ar[k]) for k in ks},
        n_gt=n_gt,
        n_ignored=n_ignored,
        n_images=len(results),
        group_recall={g: group_hit[g] / group_total[g] for g in GROUP_NAMES if group_total[g]},
        mode=mode,
    )


def scale_sweep(
    propose: Callable,
    scenes: Sequence,
    factors: Sequence[float] = (1.0, 0.75, 0.5, 0.25),
    k: int = 300,
    mode: str = "aabb",
    spec: Optional[PyramidSpec] = None,
) -> pd.DataFrame:
    """
    Recall at IoU 0.5 of `propose` on scenes shrunk by each factor.

    Args:
        propose: callable scene -> proposals sorted by score (e.g. a detector's propose)
        scenes: evaluation scenes
        factors: downsampling factors
        k: number of top proposals kept
        mode: IoU mode
        spec: pyramid used to name scale groups of the resized GT

    Returns:
        DataFrame indexed by factor with recall, AR and per-group recall columns
    """
    rows = []
    for f in factors:
        results = []
        for scene in scenes:
            resized = resize_scene(scene, f)
            results.append((resized.instances, propose(resized)))
        report = build_report(results, [k], mode, spec)
        row = {"factor": f, "recall": report.r50[k], "AR": report.ar[k], "n_gt": report.n_gt}
        for g in GROUP_NAMES:
            row[f"recall_{g}"] = report.group_recall.get(g, np.nan)
        rows.append(row)
        logger.info(f"scale x{f}: R@{k}={report.r50[k]:.3f} over {report.n_gt} GT")
    return pd.DataFrame(rows).set_index("factor")
