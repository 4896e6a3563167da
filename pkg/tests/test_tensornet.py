#!/usr/bin/env python3
"""
Unit Tests for the Tensor Engine.

This module contains pytest tests for:
- Conv2d / ReLU / UpsampleNearest2 / Linear: forward values and shapes
- SoftmaxCrossEntropy / SmoothL1: closed-form losses and gradients
- PSRoIPool: position-sensitive channel selection
- sgd_step(): momentum and weight decay
- grad_check(): linear functions and kink skipping
- save_checkpoint() / load_checkpoint(): DTF1 files

Run tests with:
    pytest tests/test_tensornet.py -v
"""

import json
import math
import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scripts.errors import EmptyBatch, FormatError, ShapeError
from scripts.tensornet import (
    CHECKPOINT_TAG,
    Add,
    Conv2d,
    Linear,
    Parameter,
    PSRoIPool,
    ReLU,
    SmoothL1,
    SoftmaxCrossEntropy,
    UpsampleNearest2,
    grad_check,
    load_checkpoint,
    ps_roi_pool,
    save_checkpoint,
    sgd_step,
    smooth_l1_loss,
    softmax_ce_loss,
)


class TestLayers:
    """Test suite for the forward passes of the layer catalog."""

    # ==================== Tests for Conv2d ====================

    def test_conv_ones(self):
        """Test a 3x3 all-ones kernel over a 3x3 all-ones input gives 9."""
        conv = Conv2d("c", 1, 1, 3)
        conv.weight.value[:] = 1.0
        out = conv.forward(np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == pytest.approx(9.0)

    def test_conv_identity_1x1(self):
        """Test a 1x1 identity kernel returns its input."""
        conv = Conv2d("c", 3, 3, 1)
        conv.weight.value[:] = np.eye(3)[:, :, None, None]
        x = np.random.default_rng(0).standard_normal((1, 3, 5, 4))
        np.testing.assert_allclose(conv.forward(x), x)

    @pytest.mark.parametrize("kernel,stride,padding,expected", [
        (3, 1, 1, (8, 8)),
        (3, 2, 1, (4, 4)),
        ((15, 1), 1, (7, 0), (8, 8)),
        ((1, 15), 1, (0, 7), (8, 8)),
        (3, 1, 0, (6, 6)),
    ])
    def test_conv_output_shape(self, kernel, stride, padding, expected):
        """Test output sizes for the kernel shapes the model uses."""
        conv = Conv2d("c", 2, 5, kernel, stride, padding)
        out = conv.forward(np.zeros((1, 2, 8, 8)))
        assert out.shape == (1, 5) + expected

    def test_conv_channel_mismatch(self):
        """Test a wrong input channel count raises ShapeError."""
        with pytest.raises(ShapeError):
            Conv2d("c", 3, 4, 3).forward(np.zeros((1, 2, 8, 8)))

    def test_conv_is_linear(self):
        """Test conv(a*x + b*y) == a*conv(x) + b*conv(y) with zero bias."""
        rng = np.random.default_rng(1)
        conv = Conv2d("c", 2, 3, 3, 1, 1, rng=rng, std=1.0)
        x, y = rng.standard_normal((2, 1, 2, 6, 6))
        lhs = conv.forward(2.0 * x - 3.0 * y)
        rhs = 2.0 * conv.forward(x) - 3.0 * conv.forward(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_conv_same_seed_same_weights(self):
        """Test initialization is a function of the generator seed."""
        a = Conv2d("c", 2, 3, 3, rng=np.random.default_rng(5), init="he")
        b = Conv2d("c", 2, 3, 3, rng=np.random.default_rng(5), init="he")
        np.testing.assert_array_equal(a.weight.value, b.weight.value)

    # ==================== Tests for ReLU / Upsample / Add / Linear ====================

    def test_relu_values(self):
        """Test relu(-1, 0, 2) == (0, 0, 2) and the zero subgradient."""
        relu = ReLU()
        out = relu.forward(np.array([-1.0, 0.0, 2.0]))
        assert out.tolist() == [0.0, 0.0, 2.0]
        assert relu.backward(np.ones(3)).tolist() == [0.0, 0.0, 1.0]

    def test_upsample_single_cell(self):
        """Test [[3]] becomes a 2x2 block of 3."""
        up = UpsampleNearest2()
        out = up.forward(np.full((1, 1, 1, 1), 3.0))
        assert out[0, 0].tolist() == [[3.0, 3.0], [3.0, 3.0]]
        assert up.backward(np.ones((1, 1, 2, 2)))[0, 0, 0, 0] == 4.0

    def test_add_shape_mismatch(self):
        """Test Add refuses different shapes."""
        with pytest.raises(ShapeError):
            Add().forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 4, 4)))

    def test_linear_identity_and_zero(self):
        """Test identity weights copy the input and zero weights give the bias."""
        fc = Linear("fc", 3, 3)
        fc.weight.value[:] = np.eye(3)
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_allclose(fc.forward(x), x)
        fc.weight.value[:] = 0.0
        fc.bias.value[:] = [1.0, 2.0, 3.0]
        np.testing.assert_allclose(fc.forward(x), [[1.0, 2.0, 3.0]])


class TestLosses:
    """Test suite for SoftmaxCrossEntropy and SmoothL1."""

    # ==================== Tests for SoftmaxCrossEntropy ====================

    def test_uniform_logits(self):
        """Test logits (0, 0) with label 1 give ln 2 and gradient (0.5, -0.5)."""
        loss, grad = softmax_ce_loss(np.zeros((1, 2)), np.array([1]))
        assert loss == pytest.approx(math.log(2.0))
        np.testing.assert_allclose(grad, [[0.5, -0.5]])

    def test_confident_logits_are_stable(self):
        """Test (+10, -10) with label 0 gives about 2.06e-9 without overflow."""
        loss, _ = softmax_ce_loss(np.array([[10.0, -10.0]]), np.array([0]))
        assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
        big, _ = softmax_ce_loss(np.array([[1000.0, -1000.0]]), np.array([1]))
        assert math.isfinite(big) and big == pytest.approx(2000.0)

    def test_weights_normalize(self):
        """Test the weighted mean divides by the weight sum."""
        logits = np.array([[0.0, 0.0], [5.0, 0.0]])
        loss, _ = softmax_ce_loss(logits, np.array([1, 0]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(math.log(2.0))

    def test_empty_batch(self):
        """Test zero samples raise EmptyBatch."""
        with pytest.raises(EmptyBatch):
            SoftmaxCrossEntropy().forward(np.zeros((0, 2)), np.zeros(0, dtype=int))

    # ==================== Tests for SmoothL1 ====================

    @pytest.mark.parametrize("d,expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (0.0, 0.0)])
    def test_smooth_l1_values(self, d, expected):
        """Test both branches of smooth-L1."""
        pred = np.zeros((1, 8))
        pred[0, 0] = d
        loss, _ = smooth_l1_loss(pred, np.zeros((1, 8)))
        assert loss == pytest.approx(expected)

    def test_smooth_l1_continuous_at_one(self):
        """Test the two branches meet at |d| = 1."""
        below, _ = smooth_l1_loss(np.full((1, 1), 1.0 - 1e-9), np.zeros((1, 1)))
        above, _ = smooth_l1_loss(np.full((1, 1), 1.0 + 1e-9), np.zeros((1, 1)))
        assert below == pytest.approx(above, abs=1e-8)

    def test_smooth_l1_gradient_clipped(self):
        """Test the gradient is d inside the unit band and sign(d) outside."""
        _, grad = smooth_l1_loss(np.array([[0.5, 3.0, -4.0]]), np.zeros((1, 3)))
        np.testing.assert_allclose(grad, [[0.5, 1.0, -1.0]])

    def test_smooth_l1_empty_is_zero(self):
        """Test no rows give a zero loss."""
        loss, grad = smooth_l1_loss(np.zeros((0, 8)), np.zeros((0, 8)))
        assert loss == 0.0 and grad.shape == (0, 8)

    def test_smooth_l1_shape_mismatch(self):
        """Test mismatched shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            SmoothL1().forward(np.zeros((2, 8)), np.zeros((3, 8)))


class TestPSRoIPool:
    """Test suite for PSRoIPool."""

    # ==================== Tests for PSRoIPool ====================

    def test_constant_channels(self):
        """Test bin (i, j) reads channel i*k + j for k=2, d=1."""
        feats = np.zeros((1, 4, 4, 4))
        for c in range(4):
            feats[0, c] = 10.0 * (c + 1)
        out = PSRoIPool(2, 1, 4).forward(feats, np.array([[0.0, 0.0, 16.0, 16.0]]))
        assert out.shape == (1, 2, 2, 1)
        assert out[0, :, :, 0].tolist() == [[10.0, 20.0], [30.0, 40.0]]

    def test_roi_inside_one_cell(self):
        """Test a roi smaller than a cell pools that cell from each bin's channel."""
        feats = np.random.default_rng(2).standard_normal((1, 4, 3, 3))
        out = ps_roi_pool(feats, (5.0, 5.0, 7.0, 7.0), 2, 4)
        for i in range(2):
            for j in range(2):
                assert out[i, j, 0] == pytest.approx(feats[0, 2 * i + j, 1, 1])

    def test_roi_outside_map_is_zero(self):
        """Test bins clamped to nothing output zero."""
        feats = np.ones((1, 4, 2, 2))
        out = PSRoIPool(2, 1, 4).forward(feats, np.array([[100.0, 100.0, 120.0, 120.0]]))
        assert not out.any()

    def test_wrong_channel_count(self):
        """Test a map without k*k*d channels raises ShapeError."""
        with pytest.raises(ShapeError):
            PSRoIPool(2, 2, 4).forward(np.zeros((1, 6, 4, 4)), np.array([[0.0, 0.0, 8.0, 8.0]]))

    def test_backward_distributes_mean(self):
        """Test the gradient of a whole-map bin spreads evenly over its cells."""
        layer = PSRoIPool(1, 1, 4)
        layer.forward(np.zeros((1, 1, 2, 2)), np.array([[0.0, 0.0, 8.0, 8.0]]))
        grad = layer.backward(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(grad, np.full((1, 1, 2, 2), 0.25))


class TestOptimizer:
    """Test suite for sgd_step()."""

    # ==================== Tests for sgd_step() ====================

    def test_zero_grad_zero_decay(self):
        """Test nothing moves without gradient or decay."""
        p = Parameter("w", np.array([1.0, -2.0]))
        sgd_step([p], lr=0.1, weight_decay=0.0)
        assert p.value.tolist() == [1.0, -2.0]

    def test_two_steps_closed_form(self):
        """Test two momentum steps against the hand-expanded update."""
        p = Parameter("w", np.array([1.0]))
        for _ in range(2):
            p.grad[:] = 0.5
            sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0005)
        # buf1 = 0.5005, v1 = 0.94995; buf2 = 0.9 * buf1 + 0.5 + 0.0005 * v1
        assert p.value[0] == pytest.approx(0.8548575025, abs=1e-12)

    def test_decay_only_shrinks(self):
        """Test a zero gradient with decay shrinks by lr * wd."""
        p = Parameter("w", np.array([2.0]))
        sgd_step([p], lr=0.01, momentum=0.9, weight_decay=0.0005)
        assert p.value[0] == pytest.approx(2.0 - 0.01 * 0.0005 * 2.0, abs=1e-15)


class TestGradCheck:
    """Test suite for grad_check()."""

    # ==================== Tests for grad_check() ====================

    def test_linear_function_is_exact(self):
        """Test f(x) = a . x checks to round-off."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal(20)
        a = rng.standard_normal(20)
        worst, per_name = grad_check(lambda: float(a @ x), {"x": (x, a.copy())})
        assert worst < 1e-8
        assert set(per_name) == {"x"}

    def test_wrong_gradient_detected(self):
        """Test a 5% gradient error is reported."""
        x = np.linspace(-1.0, 1.0, 10)
        worst, _ = grad_check(lambda: float(np.sum(x ** 3)), {"x": (x, 1.05 * 3 * x ** 2 + 0.1)})
        assert worst > 1e-2

    def test_array_restored(self):
        """Test perturbed arrays are restored after the check."""
        x = np.arange(6, dtype=float)
        before = x.copy()
        grad_check(lambda: float(np.sum(x ** 2)), {"x": (x, 2 * x)})
        np.testing.assert_array_equal(x, before)

    def test_kink_entries_skipped(self):
        """Test an entry sitting on a ReLU breakpoint is skipped only when asked."""
        x = np.array([0.0, 1.0])
        analytic = np.array([0.0, 1.0])
        strict, _ = grad_check(lambda: float(np.maximum(x, 0.0).sum()), {"x": (x, analytic)})
        assert strict > 0.4, "Central difference at the kink gives 0.5"
        lenient, _ = grad_check(lambda: float(np.maximum(x, 0.0).sum()), {"x": (x, analytic)}, skip_kinks=True)
        assert lenient < 1e-8

    def test_shape_mismatch(self):
        """Test an analytic gradient of the wrong shape raises ShapeError."""
        x = np.zeros(3)
        with pytest.raises(ShapeError):
            grad_check(lambda: 0.0, {"x": (x, np.zeros(4))})


class TestCheckpoints:
    """Test suite for save_checkpoint() and load_checkpoint()."""

    @pytest.fixture
    def params(self):
        """Fixture: two parameters with non-trivial momentum."""
        rng = np.random.default_rng(9)
        a = Parameter("layer.weight", rng.standard_normal((2, 3, 3, 3)))
        b = Parameter("layer.bias", rng.standard_normal(2))
        a.momentum[:] = rng.standard_normal(a.shape)
        return [a, b]

    # ==================== Tests for save_checkpoint() / load_checkpoint() ====================

    def test_round_trip(self, tmp_path, params):
        """Test values, momentum and metadata survive a save/load."""
        path = save_checkpoint(tmp_path / "ckpt.json", params, {"iteration": 7})
        arrays, meta = load_checkpoint(path)
        assert meta == {"iteration": 7}
        for p in params:
            np.testing.assert_array_equal(arrays[p.name], p.value)
            np.testing.assert_array_equal(arrays[f"{p.name}#momentum"], p.momentum)

    def test_manifest_layout(self, tmp_path, params):
        """Test the manifest carries the tag, blob name and tensor table."""
        path = save_checkpoint(tmp_path / "ckpt.json", params, include_momentum=False)
        manifest = json.loads(path.read_text())
        assert manifest["format"] == CHECKPOINT_TAG
        assert manifest["blob"] == "ckpt.json.bin"
        assert [t["name"] for t in manifest["tensors"]] == ["layer.weight", "layer.bias"]
        assert manifest["size"] == (54 + 2) * 8
        assert (tmp_path / "ckpt.json.bin").stat().st_size == manifest["size"]

    def test_wrong_tag(self, tmp_path, params):
        """Test a manifest with another format tag is rejected."""
        path = save_checkpoint(tmp_path / "ckpt.json", params)
        manifest = json.loads(path.read_text())
        manifest["format"] = "XXXX"
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path, params):
        """Test a short blob is rejected."""
        path = save_checkpoint(tmp_path / "ckpt.json", params)
        blob = tmp_path / "ckpt.json.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_files(self, tmp_path):
        """Test a missing manifest raises FormatError."""
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "nope.json")


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
