#!/usr/bin/env python3
"""
Unit Tests for Configuration Loading.

This module contains pytest tests for:
- load_config(): shipped YAML, environment variable, overrides
- Validation errors with dotted key paths
- config_to_dict() / config_from_dict()
- build_pyramid_spec() and resolve_test_scales()

Run tests with:
    pytest tests/test_config.py -v
"""

import os
import sys

import pytest
import yaml

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scripts.config import (
    CONFIG_ENV,
    DEFAULT_CONFIG_PATH,
    AfrpnConfig,
    build_pyramid_spec,
    config_from_dict,
    config_to_dict,
    load_config,
    parse_override,
    resolve_test_scales,
)
from scripts.errors import ConfigError, UsageError


@pytest.fixture
def config_file(tmp_path):
    """Fixture: write a YAML config and return its path."""

    def write(data):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        return path

    return write


class TestLoadConfig:
    """Test suite for load_config()."""

    # ==================== Tests for load_config() ====================

    def test_shipped_file_matches_defaults(self):
        """Test config.yaml records exactly the built-in defaults."""
        assert load_config(DEFAULT_CONFIG_PATH) == AfrpnConfig()

    def test_published_constants(self):
        """Test the detector constants carried by the defaults."""
        cfg = load_config(DEFAULT_CONFIG_PATH)
        assert cfg.pyramid.strides == (4, 8, 16)
        assert cfg.pyramid.bounds == (4.0, 24.0, 48.0)
        assert (cfg.labeling.short_factor, cfg.labeling.long_factor) == (0.5, 0.8)
        assert (cfg.proposals.n1, cfg.proposals.n2, cfg.proposals.nms_threshold) == (2000, 300, 0.7)
        assert cfg.training.rpn_lambda == (1.0, 3.0)
        assert cfg.training.rpn_batch == (128, 128)
        assert cfg.training.frcnn_batch == (64, 64)
        assert (cfg.training.momentum, cfg.training.weight_decay) == (0.9, 0.0005)

    def test_overrides_apply_last(self, config_file):
        """Test --set overrides win over the file."""
        path = config_file({"proposals": {"n2": 200}})
        cfg = load_config(path, ["proposals.n2=100", "training.lr_steps=[10, 20]", "pyramid.norm_p4=60"])
        assert cfg.proposals.n2 == 100
        assert cfg.training.lr_steps == (10, 20)
        assert cfg.pyramid.norm_p4 == 60.0

    def test_env_variable(self, config_file, monkeypatch):
        """Test AFRPN_CONFIG selects the file when no path is given."""
        monkeypatch.setenv(CONFIG_ENV, str(config_file({"runtime": {"workers": 3}})))
        assert load_config().runtime.workers == 3

    def test_exponent_without_dot(self, config_file):
        """Test "1e-3" written without a dot still reads as a float."""
        cfg = load_config(config_file({"training": {"lr": "1e-3"}}))
        assert cfg.training.lr == pytest.approx(0.001)

    # ==================== Tests for validation ====================

    @pytest.mark.parametrize("data,path", [
        ({"training": {"lrr": 1}}, "training.lrr"),
        ({"model": {"lighthead": {"kk": 3}}}, "model.lighthead.kk"),
        ({"colour": 1}, "colour"),
    ])
    def test_unknown_key_names_path(self, config_file, data, path):
        """Test unknown keys are reported with their dotted path."""
        with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
            load_config(config_file(data))

    @pytest.mark.parametrize("override", [
        "training.iterations=-1",
        "training.lr=abc",
        "training.rpn_batch=[1, 2, 3]",
        "training.ohem_rpn=maybe",
        "model.lighthead.separable_kernel=4",
        "training.lr_preset=imagenet",
    ])
    def test_bad_values(self, override):
        """Test invalid values raise ConfigError."""
        with pytest.raises(ConfigError):
            load_config(DEFAULT_CONFIG_PATH, [override])

    def test_config_error_is_usage_error(self):
        """Test configuration mistakes map to the usage exit code."""
        assert issubclass(ConfigError, UsageError)

    def test_missing_file(self, tmp_path):
        """Test an unreadable file raises ConfigError."""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_parse_override(self):
        """Test overrides parse values as YAML."""
        assert parse_override("proposals.nms_mode=quad") == (["proposals", "nms_mode"], "quad")
        assert parse_override("training.seed=7") == (["training", "seed"], 7)
        with pytest.raises(ConfigError):
            parse_override("training.seed")


class TestConversions:
    """Test suite for dict conversions and derived settings."""

    # ==================== Tests for config_to_dict() ====================

    def test_dict_round_trip(self):
        """Test config_from_dict(config_to_dict(cfg)) == cfg."""
        cfg = load_config(DEFAULT_CONFIG_PATH, ["synth.seed=4", "training.lr_preset=mlt"])
        data = config_to_dict(cfg)
        assert data["training"]["lr_steps"] == [1200, 1800]
        assert config_from_dict(data) == cfg

    # ==================== Tests for build_pyramid_spec() ====================

    def test_p4_norm_from_receptive_field(self):
        """Test the default P4 norm is half of the 155 px receptive field."""
        spec = build_pyramid_spec(AfrpnConfig())
        assert [lvl.norm for lvl in spec.levels] == [24.0, 48.0, 77.5]
        assert [lvl.stride for lvl in spec.levels] == [4, 8, 16]

    def test_explicit_p4_norm(self):
        """Test norm_p4 replaces the receptive-field rule."""
        spec = build_pyramid_spec(config_from_dict({"pyramid": {"norm_p4": 96.0}}))
        assert spec.levels[2].norm == 96.0

    # ==================== Tests for resolve_test_scales() ====================

    def test_test_scales(self):
        """Test scale strings parse to integers and tiny scales are refused."""
        assert resolve_test_scales(["512", 800, "1280"]) == (512, 800, 1280)
        with pytest.raises(ConfigError):
            resolve_test_scales(["large"])
        with pytest.raises(ConfigError):
            resolve_test_scales([8])


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
