#!/usr/bin/env python3
"""
Two-Stage Detector.

This module implements TwoStageDetector, which:
1. Runs the AF-RPN forward pass on one scene
2. Decodes dense proposals and selects N2 of them (top-N1 per module, NMS)
3. Routes proposals to the light head of their scale group
4. Scores and refines them into final quadrilaterals
5. Applies Skewed NMS

Instances are not thread-safe: layers cache activations between calls.
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from scipy.special import softmax

from scripts.config import AfrpnConfig, ProposalConfig, build_pyramid_spec, config_from_dict
from scripts.data_io import Scene
from scripts.geometry import Quad
from scripts.labeling import PyramidSpec
from scripts.model import AfrpnModel
from scripts.proposals import (
    Detection,
    Proposal,
    decode_dense,
    decode_stage2_batch,
    route_proposals,
    select_for_stage2,
    skewed_nms,
)
from scripts.tensornet import load_checkpoint

logger = logging.getLogger(__name__)


class TwoStageDetector:
    """
    AF-RPN proposals plus light-head detection.

    Attributes:
        model (AfrpnModel): trained network
        spec (PyramidSpec): pyramid used for decoding and routing
        proposal_cfg (ProposalConfig): selection and NMS settings
    """

    def __init__(self, model: AfrpnModel, spec: PyramidSpec, proposal_cfg: Optional[ProposalConfig] = None):
        self.model = model
        self.spec = spec
        self.proposal_cfg = proposal_cfg or ProposalConfig()
        self._outputs = None

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], cfg: Optional[AfrpnConfig] = None) -> "TwoStageDetector":
        """
        Load a detector from a DTF1 checkpoint.

        Args:
            path: checkpoint manifest
            cfg: configuration to build the model from; defaults to the
                configuration recorded in the checkpoint

        Raises:
            FormatError: unreadable checkpoint
            CompatError: checkpoint tensors do not fit the configured model
        """
        arrays, meta = load_checkpoint(path)
        if cfg is None:
            cfg = config_from_dict(meta.get("config", {}))
        model = AfrpnModel(cfg.model, seed=cfg.runtime.seed)
        model.load_arrays({k: v for k, v in arrays.items() if not k.endswith("#momentum")})
        logger.info(f"✓ Loaded detector from {path} ({model.parameter_count()} parameters, "
                    f"phase {meta.get('phase', '?')}, iteration {meta.get('iteration', '?')})")
        return cls(model, build_pyramid_spec(cfg, model), cfg.proposals)

    def propose(self, scene: Scene) -> List[Proposal]:
        """Second-stage proposals for one scene, best first (at most n2)."""
        pc = self.proposal_cfg
        self._outputs = self.model.forward(scene.image[None])
        per_module = decode_dense(self._outputs, self.spec, pc.score_floor)
        return select_for_stage2(per_module, pc.n1, pc.n2, pc.nms_threshold, pc.nms_mode)

    def detect(self, scene: Scene, proposals: Optional[List[Proposal]] = None) -> List[Detection]:
        """
        Final detections for one scene.

        Each routed proposal gets a text probability and refined vertices
        from its level's light head; detections below the configured score
        or with degenerate vertices are dropped before Skewed NMS.
        """
        pc = self.proposal_cfg
        if proposals is None:
            proposals = self.propose(scene)
        else:
            self._outputs = self.model.forward(scene.image[None])
        detections = []
        for level, group in route_proposals(proposals, self.spec).items():
            if not group:
                continue
            boxes = np.array([p.aabb.as_tuple() for p in group])
            cls_logits, reg = self.model.lighthead_forward(level, boxes)
            prob = softmax(cls_logits, axis=1)[:, 1]
            verts, valid = decode_stage2_batch(boxes, reg)
            for i in np.flatnonzero(valid & (prob >= pc.detection_score)):
                detections.append(Detection(Quad(verts[i]), float(prob[i]), level))
        self._outputs = None
        return skewed_nms(detections, pc.skewed_nms_threshold)

    def raw_detections(self, scene: Scene, proposals: Optional[List[Proposal]] = None) -> List[Detection]:
        """Baseline: the top-scoring proposals themselves, after Skewed NMS."""
        pc = self.proposal_cfg
        if proposals is None:
            proposals = self.propose(scene)
        dets = [Detection(p.quad, p.score, p.level) for p in proposals if p.score >= pc.detection_score]
        return skewed_nms(dets, pc.skewed_nms_threshold)
