#!/usr/bin/env python3
"""
Configuration Loading.

This module provides:
- Section dataclasses (pyramid, labeling, proposals, eval, runtime) and
  AfrpnConfig, which also embeds ModelConfig, TrainConfig and SynthConfig
- load_config(): defaults < YAML file < --set overrides
- config_to_dict(): plain dict for checkpoints and manifests
- build_pyramid_spec(): PyramidSpec with the P4 norm from the model's RF

The shipped config.yaml at the project root records the detector's
published constants; AFRPN_CONFIG points at another file.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import yaml

from scripts.data_io import SynthConfig
from scripts.errors import ConfigError
from scripts.labeling import PyramidSpec
from scripts.model import AfrpnModel, ModelConfig
from scripts.training import TrainConfig

logger = logging.getLogger(__name__)

# Get project root directory
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
DEFAULT_CONFIG_PATH = os.path.join(project_root, "config.yaml")
CONFIG_ENV = "AFRPN_CONFIG"

TEST_SCALE_PRESETS = (512, 800, 1280)


@dataclass(frozen=True)
class PyramidConfig:
    """
    Pyramid levels.

    Attributes:
        strides (Tuple[int, int, int]): P2/P3/P4 strides
        bounds (Tuple[float, float, float]): lower bounds of the small/medium/large groups
        norms (Tuple[float, float]): P2 and P3 regression norms
        rf_alpha (float): P4 norm as a proportion of the P4 receptive field
        norm_p4 (Optional[float]): explicit P4 norm (overrides rf_alpha)
    """

    strides: Tuple[int, int, int] = (4, 8, 16)
    bounds: Tuple[float, float, float] = (4.0, 24.0, 48.0)
    norms: Tuple[float, float] = (24.0, 48.0)
    rf_alpha: float = 0.5
    norm_p4: Optional[float] = None


@dataclass(frozen=True)
class LabelingConfig:
    short_factor: float = 0.5
    long_factor: float = 0.8


@dataclass(frozen=True)
class ProposalConfig:
    """
    Proposal selection and test-time settings.

    Attributes:
        score_floor (float): minimum textness decoded
        n1 (int): proposals kept per detection module
        n2 (int): proposals kept after NMS
        nms_threshold (float): proposal NMS IoU threshold
        nms_mode (str): "aabb" or "quad"
        skewed_nms_threshold (float): final-detection NMS threshold
        pos_iou (float): second-stage positive threshold
        neg_iou (float): second-stage negative threshold
        detection_score (float): minimum final detection score
        test_scales (Tuple[int, ...]): shorter-side test scales
    """

    score_floor: float = 0.1
    n1: int = 2000
    n2: int = 300
    nms_threshold: float = 0.7
    nms_mode: str = "aabb"
    skewed_nms_threshold: float = 0.3
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    detection_score: float = 0.5
    test_scales: Tuple[int, ...] = (800,)

    def selection_kwargs(self) -> Dict[str, Any]:
        """Keys consumed by the training driver."""
        return {
            "score_floor": self.score_floor, "n1": self.n1, "n2": self.n2,
            "nms_threshold": self.nms_threshold, "nms_mode": self.nms_mode,
            "pos_iou": self.pos_iou, "neg_iou": self.neg_iou,
        }


@dataclass(frozen=True)
class EvalConfig:
    ks: Tuple[int, ...] = (50, 100, 300)
    iou_mode: str = "aabb"
    prf_iou: float = 0.5
    prf_mode: str = "quad"
    sweep_factors: Tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1
    log_level: str = "INFO"
    seed: int = 0


@dataclass(frozen=True)
class AfrpnConfig:
    """Every configuration section."""

    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)


# ==================== Building ====================


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build(hint, value, path)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(args, value)))
    if hint is float:
        # PyYAML reads "1e-3" (no dot) as a string.
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown configuration key: {prefix + '.' if prefix else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def parse_override(text: str) -> Tuple[Sequence[str], Any]:
    """Split "section.key=value" into (path, YAML-parsed value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from e
    return path, value


def _apply_override(data: Dict[str, Any], path: Sequence[str], value: Any):
    node = data
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override path {'.'.join(path)} crosses the scalar {part!r}")
        node = child
    node[path[-1]] = value


def config_from_dict(data: Optional[Dict[str, Any]]) -> AfrpnConfig:
    """Build an AfrpnConfig from nested dicts over the defaults."""
    return _build(AfrpnConfig, dict(data or {}))


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> AfrpnConfig:
    """
    Resolve the configuration.

    Args:
        path: YAML file; defaults to $AFRPN_CONFIG, then config.yaml at the
            project root when it exists
        overrides: "section.key=value" strings applied last

    Returns:
        AfrpnConfig

    Raises:
        ConfigError: unreadable file, unknown key or bad value
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV) or (DEFAULT_CONFIG_PATH if os.path.exists(DEFAULT_CONFIG_PATH) else None)
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for text in overrides:
        key, value = parse_override(text)
        _apply_override(data, key, value)
    cfg = config_from_dict(data)
    logger.debug(f"Loaded configuration from {path or 'defaults'} with {len(overrides)} overrides")
    return cfg


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg) -> Dict[str, Any]:
    """Nested plain dict (tuples as lists) suitable for JSON and YAML."""
    return _plain(dataclasses.asdict(cfg))


def build_pyramid_spec(cfg: AfrpnConfig, model: Optional[AfrpnModel] = None) -> PyramidSpec:
    """
    PyramidSpec for a configuration.

    The P4 norm is rf_alpha times the P4 receptive field of `model`
    (or of a model built from cfg.model), unless norm_p4 is set.
    """
    p = cfg.pyramid
    if p.norm_p4 is not None:
        rf = 0.0
    else:
        rf = float((model or AfrpnModel(cfg.model)).receptive_field("P4"))
    return PyramidSpec.default(rf, p.rf_alpha, p.strides, p.bounds, p.norms, p.norm_p4)


def resolve_test_scales(values: Sequence[Union[int, str]]) -> Tuple[int, ...]:
    """Parse --scale values; each must be an integer >= 16."""
    scales = []
    for v in values:
        try:
            s = int(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"--scale expects integers such as {TEST_SCALE_PRESETS}, got {v!r}") from e
        if s < 16:
            raise ConfigError(f"test scale must be >= 16, got {s}")
        scales.append(s)
    return tuple(scales)
