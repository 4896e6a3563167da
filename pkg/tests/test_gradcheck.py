#!/usr/bin/env python3
"""
Unit Tests for the Gradient-Check Suite.

This module contains pytest tests for:
- run_suite(): every layer and the full graph within tolerance
- The corrupted-convolution self-test
- worst_per_layer(): per-layer summary

Run tests with:
    pytest tests/test_gradcheck.py -v
"""

import os
import sys

import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scripts.gradcheck import TOLERANCE, run_suite, worst_per_layer

LAYERS = ["conv2d", "relu", "upsample", "linear", "softmax_ce", "smooth_l1", "ps_roi_pool", "full_graph"]


@pytest.fixture(scope="module")
def table():
    """Fixture: suite results for seed 0."""
    return run_suite(seed=0)


class TestSuite:
    """Test suite for run_suite()."""

    # ==================== Tests for run_suite() ====================

    def test_every_case_passes(self, table):
        """Test every case stays below the tolerance."""
        failed = table[~table["passed"]]
        assert failed.empty, f"Gradient check failures:\n{failed.to_string()}"
        assert (table["max_rel_error"] < TOLERANCE).all()

    def test_layer_coverage(self, table):
        """Test every layer kind is checked with several configurations."""
        assert list(dict.fromkeys(table["layer"])) == LAYERS
        counts = table.groupby("layer").size()
        assert counts["conv2d"] >= 6
        for layer in LAYERS[1:-1]:
            assert counts[layer] >= 5, f"{layer} has only {counts[layer]} cases"
        assert counts["full_graph"] == 1

    def test_corrupt_conv_is_caught(self):
        """Test a 5% error in the conv input gradient fails the conv cases."""
        table = run_suite(seed=0, corrupt=True)
        conv = table[table["layer"] == "conv2d"]
        assert not conv["passed"].all()
        assert table[table["layer"] == "relu"]["passed"].all()

    # ==================== Tests for worst_per_layer() ====================

    def test_worst_per_layer(self, table):
        """Test the summary has one row per layer."""
        summary = worst_per_layer(table)
        assert list(summary.index) == LAYERS
        assert summary["passed"].all()
        assert summary.loc["conv2d", "max_rel_error"] == table[table["layer"] == "conv2d"]["max_rel_error"].max()


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
