#!/usr/bin/env python3
"""
AF-RPN Network Definition.

This module composes tensornet layers into:
- a small analytic backbone (stem + three stages, C2/C3/C4 at strides 4/8/16)
- an FPN neck producing P2/P3/P4 (lateral 1x1, top-down nearest upsampling,
  3x3 smoothing)
- three unshared detection heads (3x3 conv, then sibling 1x1 convs for
  2 textness logits and 8 offsets)
- three unshared light heads for the second stage (15x1 and 1x15 convs to a
  thin k*k*d map, position-sensitive ROI pooling, one FC layer, sibling
  linear outputs)
- analytic receptive fields

Usage:
    model = build_model(ModelConfig(), seed=0)
    outputs = model.forward(images)            # images: 1 x 3 x H x W
    cls, reg = model.lighthead_forward("P3", rois)
    model.backward(head_grads, lighthead_grads)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scripts.errors import CompatError, ShapeError
from scripts.tensornet import (
    Add,
    Conv2d,
    Linear,
    Parameter,
    PSRoIPool,
    ReLU,
    UpsampleNearest2,
)

logger = logging.getLogger(__name__)

LEVEL_NAMES = ("P2", "P3", "P4")
LEVEL_STRIDES = {"P2": 4, "P3": 8, "P4": 16}


@dataclass(frozen=True)
class LightHeadConfig:
    """
    Second-stage head widths.

    Attributes:
        k (int): PS-ROI pooling grid size
        d (int): channels per bin; the thin map has k*k*d channels
        separable_kernel (int): length of the 15x1 / 1x15 kernels
        fc_units (int): width of the single fully-connected layer
    """

    k: int = 7
    d: int = 2
    separable_kernel: int = 15
    fc_units: int = 256

    @property
    def thin_channels(self) -> int:
        return self.k * self.k * self.d


@dataclass(frozen=True)
class ModelConfig:
    """
    Network widths and initialization.

    Attributes:
        in_channels (int): image channels
        stem_width (int): width of the two stem convs
        stage_widths (Tuple[int, int, int]): widths of the stages feeding C2, C3, C4
        fpn_channels (int): width of every pyramid level
        head_hidden (int): width of the 3x3 conv in each detection head
        lighthead (LightHeadConfig): second-stage head widths
        backbone_init (str): "he" or "gaussian" for backbone and neck
        init_std (float): std of the Gaussian init of heads
    """

    in_channels: int = 3
    stem_width: int = 8
    stage_widths: Tuple[int, int, int] = (16, 24, 32)
    fpn_channels: int = 32
    head_hidden: int = 32
    lighthead: LightHeadConfig = field(default_factory=LightHeadConfig)
    backbone_init: str = "he"
    init_std: float = 0.01

    def __post_init__(self):
        widths = [self.in_channels, self.stem_width, *self.stage_widths, self.fpn_channels, self.head_hidden,
                  self.lighthead.k, self.lighthead.d, self.lighthead.separable_kernel, self.lighthead.fc_units]
        if len(self.stage_widths) != 3:
            raise ValueError(f"stage_widths needs 3 entries, got {self.stage_widths}")
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1: {self}")
        if self.lighthead.separable_kernel % 2 != 1:
            raise ValueError("separable_kernel must be odd to preserve map size")
        if self.backbone_init not in ("he", "gaussian"):
            raise ValueError(f"backbone_init must be 'he' or 'gaussian', got {self.backbone_init!r}")


@dataclass
class AfrpnOutputs:
    """
    Dense head outputs for one forward pass.

    Attributes:
        scores (Dict[str, np.ndarray]): level -> N x 2 x H x W logits
        offsets (Dict[str, np.ndarray]): level -> N x 8 x H x W offsets
        pyramid (Dict[str, np.ndarray]): level -> N x C x H x W features
    """

    scores: Dict[str, np.ndarray]
    offsets: Dict[str, np.ndarray]
    pyramid: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def levels(self) -> List[str]:
        return list(self.scores.keys())


def receptive_field_of(layers: Sequence[Tuple[int, int]]) -> int:
    """
    Receptive field of a chain of convolutions.

    Args:
        layers: (kernel, stride) pairs from input to output

    Returns:
        Width in input pixels of the region seen by one output unit

    Example:
        >>> receptive_field_of([(3, 1), (3, 1)])
        5
    """
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


# ==================== Building blocks ====================


class ConvBlock:
    """Conv2d followed by ReLU."""

    def __init__(self, conv: Conv2d):
        self.conv = conv
        self.relu = ReLU()

    def parameters(self) -> List[Parameter]:
        return self.conv.parameters()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.relu.forward(self.conv.forward(x))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.relu.backward(dout))


class Backbone:
    """Stem (stride 2) and three stages producing C2, C3, C4."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        init = cfg.backbone_init
        std = cfg.init_std
        w = cfg.stem_width
        self.stem = [
            ConvBlock(Conv2d("backbone.stem.0", cfg.in_channels, w, 3, 2, 1, rng, init, std)),
            ConvBlock(Conv2d("backbone.stem.1", w, w, 3, 1, 1, rng, init, std)),
        ]
        self.stages = []
        prev = w
        for i, width in enumerate(cfg.stage_widths):
            self.stages.append([
                ConvBlock(Conv2d(f"backbone.C{i + 2}.0", prev, width, 3, 2, 1, rng, init, std)),
                ConvBlock(Conv2d(f"backbone.C{i + 2}.1", width, width, 3, 1, 1, rng, init, std)),
            ])
            prev = width

    def blocks(self) -> List[ConvBlock]:
        return self.stem + [b for stage in self.stages for b in stage]

    def parameters(self) -> List[Parameter]:
        return [p for b in self.blocks() for p in b.parameters()]

    def forward(self, x: np.ndarray) -> List[np.ndarray]:
        for b in self.stem:
            x = b.forward(x)
        feats = []
        for stage in self.stages:
            for b in stage:
                x = b.forward(x)
            feats.append(x)
        return feats

    def backward(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        dx = None
        for stage, g in reversed(list(zip(self.stages, grads))):
            dx = g if dx is None else dx + g
            for b in reversed(stage):
                dx = b.backward(dx)
        for b in reversed(self.stem):
            dx = b.backward(dx)
        return dx

    def conv_chain(self, level_index: int) -> List[Tuple[int, int]]:
        """(kernel, stride) pairs from the image to C_{level_index + 2}."""
        chain = [(b.conv.kernel[0], b.conv.stride) for b in self.stem]
        for stage in self.stages[:level_index + 1]:
            chain.extend((b.conv.kernel[0], b.conv.stride) for b in stage)
        return chain


class FPN:
    """Top-down feature pyramid over C2, C3, C4."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        init, std, c = cfg.backbone_init, cfg.init_std, cfg.fpn_channels
        self.lateral = {
            name: Conv2d(f"fpn.{name}.lateral", width, c, 1, 1, 0, rng, init, std)
            for name, width in zip(LEVEL_NAMES, cfg.stage_widths)
        }
        self.smooth = {
            name: Conv2d(f"fpn.{name}.smooth", c, c, 3, 1, 1, rng, init, std)
            for name in LEVEL_NAMES
        }
        self.upsample = {name: UpsampleNearest2() for name in LEVEL_NAMES[:-1]}
        self.add = {name: Add() for name in LEVEL_NAMES[:-1]}

    def parameters(self) -> List[Parameter]:
        params = []
        for name in LEVEL_NAMES:
            params += self.lateral[name].parameters() + self.smooth[name].parameters()
        return params

    def forward(self, c2: np.ndarray, c3: np.ndarray, c4: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns:
            (P2, P3, P4), each fpn_channels wide

        Raises:
            ShapeError: upsampled map does not match the lateral map
        """
        feats = dict(zip(LEVEL_NAMES, (c2, c3, c4)))
        merged = {}
        top = None
        for name, upper in zip(reversed(LEVEL_NAMES), (None,) + tuple(reversed(LEVEL_NAMES))[:-1]):
            lat = self.lateral[name].forward(feats[name])
            if top is not None:
                up = self.upsample[name].forward(top)
                if up.shape != lat.shape:
                    raise ShapeError(
                        f"fpn: upsampled {upper} {up.shape} does not match {name} lateral {lat.shape}; "
                        "input sides must be multiples of 16"
                    )
                lat = self.add[name].forward(lat, up)
            merged[name] = lat
            top = lat
        return tuple(self.smooth[name].forward(merged[name]) for name in LEVEL_NAMES)

    def backward(self, dp2: np.ndarray, dp3: np.ndarray, dp4: np.ndarray) -> List[np.ndarray]:
        dp = dict(zip(LEVEL_NAMES, (dp2, dp3, dp4)))
        dc = {}
        carry = None
        # Finest level first: each merged map passes gradient up to the coarser one.
        for name in LEVEL_NAMES:
            dm = self.smooth[name].backward(dp[name])
            if carry is not None:
                dm = dm + carry
            if name in self.upsample:
                dlat, dup = self.add[name].backward(dm)
                carry = self.upsample[name].backward(dup)
            else:
                dlat = dm
            dc[name] = self.lateral[name].backward(dlat)
        return [dc[name] for name in LEVEL_NAMES]


class DetectionHead:
    """3x3 conv + relu, then sibling 1x1 convs for textness and offsets."""

    def __init__(self, level: str, cfg: ModelConfig, rng: np.random.Generator):
        std = cfg.init_std
        self.level = level
        self.conv = ConvBlock(Conv2d(f"head.{level}.conv", cfg.fpn_channels, cfg.head_hidden, 3, 1, 1, rng, "gaussian", std))
        self.cls = Conv2d(f"head.{level}.cls", cfg.head_hidden, 2, 1, 1, 0, rng, "gaussian", std)
        self.reg = Conv2d(f"head.{level}.reg", cfg.head_hidden, 8, 1, 1, 0, rng, "gaussian", std)

    def parameters(self) -> List[Parameter]:
        return self.conv.parameters() + self.cls.parameters() + self.reg.parameters()

    def forward(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        h = self.conv.forward(p)
        return self.cls.forward(h), self.reg.forward(h)

    def backward(self, dscore: np.ndarray, doffset: np.ndarray) -> np.ndarray:
        dh = self.cls.backward(dscore) + self.reg.backward(doffset)
        return self.conv.backward(dh)


class LightHead:
    """
    Second-stage head for one pyramid level.

    The separable convs run once per pass over the whole level; pooling and
    the FC layers then run over every roi routed to the level.
    """

    def __init__(self, level: str, stride: int, cfg: ModelConfig, rng: np.random.Generator):
        lh = cfg.lighthead
        std = cfg.init_std
        c = cfg.fpn_channels
        half = lh.separable_kernel // 2
        self.level = level
        self.cfg = lh
        self.sep_v = Conv2d(f"lighthead.{level}.sep_v", c, c, (lh.separable_kernel, 1), 1, (half, 0), rng, "gaussian", std)
        self.sep_h = Conv2d(f"lighthead.{level}.sep_h", c, lh.thin_channels, (1, lh.separable_kernel), 1, (0, half), rng, "gaussian", std)
        self.pool = PSRoIPool(lh.k, lh.d, stride)
        self.fc = Linear(f"lighthead.{level}.fc", lh.thin_channels, lh.fc_units, rng, std)
        self.fc_relu = ReLU()
        self.cls = Linear(f"lighthead.{level}.cls", lh.fc_units, 2, rng, std)
        self.reg = Linear(f"lighthead.{level}.reg", lh.fc_units, 8, rng, std)
        self._n_rois = 0

    def parameters(self) -> List[Parameter]:
        return (self.sep_v.parameters() + self.sep_h.parameters() + self.fc.parameters()
                + self.cls.parameters() + self.reg.parameters())

    def thin_map(self, p: np.ndarray) -> np.ndarray:
        return self.sep_h.forward(self.sep_v.forward(p))

    def forward(self, p: np.ndarray, rois) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            p: 1 x C x H x W pyramid level
            rois: (R, 4) image-pixel AABBs or a sequence of AABB

        Returns:
            (R x 2 logits, R x 8 offsets); empty arrays when R == 0
        """
        rois = np.asarray([r.as_tuple() if hasattr(r, "as_tuple") else r for r in rois], dtype=np.float64).reshape(-1, 4)
        self._n_rois = len(rois)
        if not self._n_rois:
            return np.zeros((0, 2)), np.zeros((0, 8))
        thin = self.thin_map(p)
        pooled = self.pool.forward(thin, rois)
        h = self.fc_relu.forward(self.fc.forward(pooled.reshape(len(rois), -1)))
        return self.cls.forward(h), self.reg.forward(h)

    def backward(self, dcls: np.ndarray, dreg: np.ndarray) -> Optional[np.ndarray]:
        if not self._n_rois:
            return None
        dh = self.cls.backward(dcls) + self.reg.backward(dreg)
        dpooled = self.fc.backward(self.fc_relu.backward(dh))
        lh = self.cfg
        dthin = self.pool.backward(dpooled.reshape(-1, lh.k, lh.k, lh.d))
        self._n_rois = 0
        return self.sep_v.backward(self.sep_h.backward(dthin))


# ==================== Model ====================


class AfrpnModel:
    """
    Backbone + FPN + three detection heads + three light heads.

    Attributes:
        cfg (ModelConfig): widths and init
        seed (int): initialization seed
        backbone (Backbone)
        fpn (FPN)
        heads (Dict[str, DetectionHead])
        lightheads (Dict[str, LightHead])
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.backbone = Backbone(cfg, rng)
        self.fpn = FPN(cfg, rng)
        self.heads = {name: DetectionHead(name, cfg, rng) for name in LEVEL_NAMES}
        self.lightheads = {name: LightHead(name, LEVEL_STRIDES[name], cfg, rng) for name in LEVEL_NAMES}
        self._pyramid: Dict[str, np.ndarray] = {}
        self._image_shape = None

    # ---------- parameters ----------

    def parameters(self, include_lightheads: bool = True) -> List[Parameter]:
        params = self.backbone.parameters() + self.fpn.parameters()
        for name in LEVEL_NAMES:
            params += self.heads[name].parameters()
        if include_lightheads:
            for name in LEVEL_NAMES:
                params += self.lightheads[name].parameters()
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        """
        Load values (and "#momentum" buffers when present).

        Raises:
            CompatError: missing tensor or shape mismatch
        """
        params = self.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                if strict:
                    raise CompatError(f"checkpoint has no tensor {name!r}")
                continue
            if tuple(arrays[name].shape) != p.shape:
                raise CompatError(f"{name}: checkpoint shape {tuple(arrays[name].shape)} != model shape {p.shape}")
            p.value[...] = arrays[name]
            mom = arrays.get(f"{name}#momentum")
            if mom is not None:
                p.momentum[...] = mom
            else:
                p.momentum.fill(0.0)
        unknown = [n for n in arrays if n.split("#")[0] not in params]
        if unknown and strict:
            raise CompatError(f"checkpoint has tensors the model lacks: {unknown[:5]}")

    # ---------- forward / backward ----------

    def forward(self, images: np.ndarray) -> AfrpnOutputs:
        """
        Run backbone, neck and detection heads.

        Args:
            images: N x C x H x W with H, W multiples of 16

        Returns:
            AfrpnOutputs with per-level scores, offsets and pyramid features
        """
        if images.ndim != 4 or images.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x H x W images, got {images.shape}")
        if images.shape[2] % 16 or images.shape[3] % 16:
            raise ShapeError(f"image sides must be multiples of 16, got {images.shape[2:]}")
        self._image_shape = images.shape
        c2, c3, c4 = self.backbone.forward(images)
        pyramid = dict(zip(LEVEL_NAMES, self.fpn.forward(c2, c3, c4)))
        self._pyramid = pyramid
        scores, offsets = {}, {}
        for name in LEVEL_NAMES:
            scores[name], offsets[name] = self.heads[name].forward(pyramid[name])
        return AfrpnOutputs(scores, offsets, pyramid)

    def lighthead_forward(self, level: str, rois) -> Tuple[np.ndarray, np.ndarray]:
        """Second-stage logits and offsets for rois routed to `level`."""
        if level not in self._pyramid:
            raise RuntimeError("forward() must run before lighthead_forward()")
        return self.lightheads[level].forward(self._pyramid[level], rois)

    def backward(
        self,
        head_grads: Dict[str, Tuple[np.ndarray, np.ndarray]],
        lighthead_grads: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
    ) -> np.ndarray:
        """
        Back-propagate loss gradients to every parameter.

        Args:
            head_grads: level -> (dscore, doffset); missing levels count as zero
            lighthead_grads: level -> (dcls, dreg) for levels whose light
                head ran this pass

        Returns:
            Gradient with respect to the input images
        """
        dp = {}
        for name in LEVEL_NAMES:
            p = self._pyramid[name]
            if name in head_grads:
                ds, do = head_grads[name]
                dp[name] = self.heads[name].backward(ds, do)
            else:
                dp[name] = np.zeros_like(p)
            if lighthead_grads and name in lighthead_grads:
                dcls, dreg = lighthead_grads[name]
                extra = self.lightheads[name].backward(dcls, dreg)
                if extra is not None:
                    dp[name] = dp[name] + extra
        dc = self.fpn.backward(dp["P2"], dp["P3"], dp["P4"])
        return self.backbone.backward(dc)

    # ---------- analysis ----------

    def receptive_field(self, level: str) -> int:
        """
        Analytic receptive field of one detection-head unit on `level`.

        Follows the bottom-up path to C_level, the lateral 1x1, the 3x3
        smoothing conv and the head's 3x3 conv.
        """
        li = LEVEL_NAMES.index(level)
        stride = LEVEL_STRIDES[level]
        chain = self.backbone.conv_chain(li)
        chain += [(1, 1), (self.fpn.smooth[level].kernel[0], 1), (self.heads[level].conv.conv.kernel[0], 1)]
        total_stride = int(np.prod([s for _, s in chain]))
        if total_stride != stride:
            raise ShapeError(f"{level}: conv chain has stride {total_stride}, expected {stride}")
        return receptive_field_of(chain)


def build_model(cfg: ModelConfig, seed: int = 0) -> AfrpnModel:
    """Build and initialize the network deterministically from `seed`."""
    model = AfrpnModel(cfg, seed)
    logger.info(f"✓ Built AF-RPN model: {model.parameter_count()} parameters, "
                f"RF P2/P3/P4 = {[model.receptive_field(n) for n in LEVEL_NAMES]}")
    return model


def fpn_forward(model: AfrpnModel, c2: np.ndarray, c3: np.ndarray, c4: np.ndarray):
    return model.fpn.forward(c2, c3, c4)


def detection_head_forward(model: AfrpnModel, level: str, p: np.ndarray):
    return model.heads[level].forward(p)
