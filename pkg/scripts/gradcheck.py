#!/usr/bin/env python3
"""
Finite-Difference Gradient Suite.

This module implements:
- one check per layer kind over several random shapes
  (conv2d incl. 15x1 / 1x15, relu, upsample, linear, softmax-CE,
  smooth-L1, PS-ROI pooling)
- a check of the whole image -> AF-RPN + light-head loss graph on a
  tiny model
- run_suite(): DataFrame of worst relative errors, one row per case

Layer checks use the scalar f(x) = sum(G * layer(x)) for a fixed random G.
"""

import logging
import time
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from scripts.geometry import make_rect
from scripts.labeling import NEGATIVE, POSITIVE, PyramidSpec, TextInstance, generate_labels
from scripts.model import AfrpnModel, LightHeadConfig, ModelConfig
from scripts.tensornet import (
    Conv2d,
    Linear,
    PSRoIPool,
    ReLU,
    SmoothL1,
    SoftmaxCrossEntropy,
    UpsampleNearest2,
    grad_check,
)
from scripts.training import frcnn_level_loss, rpn_module_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
MAX_ENTRIES = 24


class CorruptConv2d(Conv2d):
    """Conv2d whose input gradient is off by 5%; the suite must catch it."""

    def backward(self, dout):
        return 1.05 * super().backward(dout)


def _check_layer(
    forward: Callable[[], np.ndarray],
    backward: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    params,
    rng: np.random.Generator,
) -> float:
    out = forward()
    g = rng.standard_normal(out.shape)
    for p in params:
        p.zero_grad()
    dx = backward(g)
    entries = {"x": (x, dx)}
    for p in params:
        entries[p.name] = (p.value, p.grad.copy())
    worst, _ = grad_check(lambda: float(np.sum(g * forward())), entries, STEP, MAX_ENTRIES, rng)
    return worst


# ==================== Layer cases ====================


def conv_cases(rng: np.random.Generator, corrupt: bool = False) -> List[Tuple[str, float]]:
    cls = CorruptConv2d if corrupt else Conv2d
    specs = [
        ("3x3 s1", (3, 3), 1, (1, 1)),
        ("3x3 s2", (3, 3), 2, (1, 1)),
        ("15x1", (15, 1), 1, (7, 0)),
        ("1x15", (1, 15), 1, (0, 7)),
        ("1x1", (1, 1), 1, (0, 0)),
        ("3x3 s1 nopad", (3, 3), 1, (0, 0)),
    ]
    results = []
    for label, kernel, stride, pad in specs:
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(5, 10)), int(rng.integers(5, 10))
        conv = cls("conv", cin, cout, kernel, stride, pad, rng=rng, init="gaussian", std=0.5)
        conv.bias.value[:] = rng.standard_normal(cout)
        x = rng.standard_normal((1, cin, h, w))
        err = _check_layer(lambda: conv.forward(x), conv.backward, x, conv.parameters(), rng)
        results.append((f"{label} {cin}->{cout} {h}x{w}", err))
    return results


def relu_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
        # Keep inputs away from the kink at 0.
        x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)
        layer = ReLU()
        err = _check_layer(lambda: layer.forward(x), layer.backward, x, [], rng)
        results.append((str(shape), err))
    return results


def upsample_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        x = rng.standard_normal(shape)
        layer = UpsampleNearest2()
        err = _check_layer(lambda: layer.forward(x), layer.backward, x, [], rng)
        results.append((str(shape), err))
    return results


def linear_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        k, fin, fout = int(rng.integers(1, 6)), int(rng.integers(1, 8)), int(rng.integers(1, 6))
        layer = Linear("fc", fin, fout, rng=rng, std=0.5)
        layer.bias.value[:] = rng.standard_normal(fout)
        x = rng.standard_normal((k, fin))
        err = _check_layer(lambda: layer.forward(x), layer.backward, x, layer.parameters(), rng)
        results.append((f"{k}x{fin}->{fout}", err))
    return results


def softmax_ce_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        k, c = int(rng.integers(1, 10)), int(rng.integers(2, 4))
        logits = rng.standard_normal((k, c)) * 2.0
        labels = rng.integers(0, c, size=k)
        weights = rng.uniform(0.0, 1.0, size=k) + 0.1
        loss = SoftmaxCrossEntropy()
        loss.forward(logits, labels, weights)
        grad = loss.backward()
        worst, _ = grad_check(lambda: loss.forward(logits, labels, weights), {"logits": (logits, grad)},
                              STEP, MAX_ENTRIES, rng)
        results.append((f"{k}x{c}", worst))
    return results


def smooth_l1_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        k = int(rng.integers(1, 8))
        target = rng.standard_normal((k, 8))
        # Differences on both branches, away from |d| = 1.
        mag = np.where(rng.random((k, 8)) < 0.5, rng.uniform(0.05, 0.9, (k, 8)), rng.uniform(1.1, 2.5, (k, 8)))
        pred = target + rng.choice([-1.0, 1.0], size=(k, 8)) * mag
        weights = rng.uniform(0.5, 1.5, size=k)
        loss = SmoothL1()
        loss.forward(pred, target, weights)
        grad = loss.backward()
        worst, _ = grad_check(lambda: loss.forward(pred, target, weights), {"pred": (pred, grad)},
                              STEP, MAX_ENTRIES, rng)
        results.append((f"{k}x8", worst))
    return results


def ps_roi_cases(rng: np.random.Generator) -> List[Tuple[str, float]]:
    results = []
    for _ in range(5):
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        stride = int(rng.choice([4, 8, 16]))
        h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        feats = rng.standard_normal((1, k * k * d, h, w))
        r = int(rng.integers(1, 4))
        x0 = rng.uniform(-stride, w * stride * 0.6, r)
        y0 = rng.uniform(-stride, h * stride * 0.6, r)
        rois = np.stack([x0, y0, x0 + rng.uniform(stride, w * stride, r), y0 + rng.uniform(stride, h * stride, r)], axis=1)
        layer = PSRoIPool(k, d, stride)
        err = _check_layer(lambda: layer.forward(feats, rois), layer.backward, feats, [], rng)
        results.append((f"k{k} d{d} s{stride} {h}x{w} R{r}", err))
    return results


# ==================== Full graph ====================


TINY_MODEL = ModelConfig(
    stem_width=2,
    stage_widths=(2, 2, 2),
    fpn_channels=2,
    head_hidden=2,
    lighthead=LightHeadConfig(k=2, d=1, separable_kernel=3, fc_units=4),
    init_std=0.3,
)


def full_graph_case(seed: int = 0, size: int = 32) -> Tuple[str, float]:
    """
    Check d(loss)/d(image) and a subset of every parameter on a tiny model.

    The loss is the sum of the three detection-module losses on fixed
    samples plus light-head losses on fixed rois.
    Entries whose step straddles a ReLU breakpoint are skipped.
    """
    rng = np.random.default_rng(seed)
    model = AfrpnModel(TINY_MODEL, seed=seed)
    spec = PyramidSpec.default(model.receptive_field("P4"), norms=(24.0, 48.0))
    image = rng.uniform(0.0, 1.0, (1, 3, size, size))
    instances = [
        TextInstance.from_quad(make_rect(12.0, 10.0, 16.0, 8.0, 20.0).quad),
        TextInstance.from_quad(make_rect(16.0, 18.0, 28.0, 26.0, 0.0).quad),
    ]
    label_map = generate_labels(instances, (size, size), spec)
    samples = {}
    for name in spec.names:
        flat = label_map[name].classes.reshape(-1)
        pos = np.flatnonzero(flat == POSITIVE)
        neg = np.flatnonzero(flat == NEGATIVE)[:8]
        if neg.size:
            samples[name] = (pos, neg)
    rois = {
        "P2": np.array([[2.0, 2.0, 20.0, 14.0], [6.0, 3.0, 30.0, 29.0]]),
        "P3": np.array([[0.0, 4.0, 28.0, 30.0]]),
    }
    lh_labels = {n: rng.integers(0, 2, size=len(r)) for n, r in rois.items()}
    lh_targets = {n: rng.standard_normal((len(r), 8)) * 0.3 for n, r in rois.items()}

    def loss_and_grads():
        out = model.forward(image)
        total = 0.0
        head_grads, lh_grads = {}, {}
        for name, sample in samples.items():
            ml = rpn_module_loss(out.scores[name], out.offsets[name], label_map[name], sample, 1.0, 3.0)
            total += ml.total
            head_grads[name] = ml.grads
        for name, r in rois.items():
            cls, reg = model.lighthead_forward(name, r)
            fl = frcnn_level_loss(cls, reg, lh_labels[name], lh_targets[name], np.ones(len(r)), 1.0, 1.0)
            total += fl.total
            lh_grads[name] = fl.grads
        return total, head_grads, lh_grads

    model.zero_grad()
    _, head_grads, lh_grads = loss_and_grads()
    dimage = model.backward(head_grads, lh_grads)
    entries: Dict[str, Tuple[np.ndarray, np.ndarray]] = {"image": (image, dimage)}
    for p in model.parameters():
        entries[p.name] = (p.value, p.grad.copy())
    worst, per_name = grad_check(lambda: loss_and_grads()[0], entries, STEP, 4, rng, skip_kinks=True)
    logger.debug(f"full graph worst tensors: {sorted(per_name.items(), key=lambda kv: -kv[1])[:3]}")
    return f"{size}x{size} tiny model, {len(entries)} tensors", worst


# ==================== Suite ====================


def run_suite(seed: int = 0, corrupt: bool = False, tolerance: float = TOLERANCE) -> pd.DataFrame:
    """
    Run every check.

    Args:
        seed: generator seed for shapes and values
        corrupt: use a conv layer with a wrong input gradient (self-test)
        tolerance: maximum accepted relative error

    Returns:
        DataFrame with columns layer, case, max_rel_error, passed
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    rows = []
    groups = [
        ("conv2d", lambda: conv_cases(rng, corrupt)),
        ("relu", lambda: relu_cases(rng)),
        ("upsample", lambda: upsample_cases(rng)),
        ("linear", lambda: linear_cases(rng)),
        ("softmax_ce", lambda: softmax_ce_cases(rng)),
        ("smooth_l1", lambda: smooth_l1_cases(rng)),
        ("ps_roi_pool", lambda: ps_roi_cases(rng)),
        ("full_graph", lambda: [full_graph_case(seed)]),
    ]
    for layer, run in groups:
        for case, err in run():
            rows.append({"layer": layer, "case": case, "max_rel_error": float(err), "passed": bool(err < tolerance)})
    table = pd.DataFrame(rows)
    elapsed = time.perf_counter() - start
    n_failed = int((~table["passed"]).sum())
    if n_failed:
        logger.warning(f"Gradient suite: {n_failed} of {len(table)} cases above {tolerance:g} ({elapsed:.1f}s)")
    else:
        logger.info(f"✓ Gradient suite: {len(table)} cases below {tolerance:g} ({elapsed:.1f}s)")
    return table


def worst_per_layer(table: pd.DataFrame) -> pd.DataFrame:
    """Worst relative error and pass flag per layer kind."""
    return table.groupby("layer", sort=False).agg(max_rel_error=("max_rel_error", "max"), passed=("passed", "all"))
