#!/usr/bin/env python3
"""
Mini-Batch Sampling, Multi-Task Losses and Training Drivers.

This module implements:
- TrainConfig and step learning-rate schedules (with named presets)
- sample_sliding_points() / sample_proposals(): quota sampling with fill rule
- rpn_module_loss() / frcnn_level_loss(): lambda_cls * L_cls + lambda_loc * L_loc
- ohem_select(): top-B hard example selection
- Trainer: one scene per iteration, momentum SGD, JSON-lines log
- train_afrpn(): stage one, AF-RPN alone
- train_end2end(): stage two, AF-RPN + light heads on selected proposals

Randomness for iteration t comes from a generator seeded with (seed, t),
so a run resumed from a checkpoint draws the same samples as an
uninterrupted one.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from scripts.errors import EmptyBatch, NumericalFailure, UsageError
from scripts.labeling import NEGATIVE, POSITIVE, LabelMap, LevelLabels, PyramidSpec, generate_labels
from scripts.model import AfrpnModel
from scripts.proposals import (
    STAGE2_NEGATIVE,
    STAGE2_POSITIVE,
    Proposal,
    Stage2Label,
    assign_stage2_labels,
    decode_dense,
    route_proposals,
    select_for_stage2,
)
from scripts.tensornet import SmoothL1, SoftmaxCrossEntropy, load_checkpoint, save_checkpoint, sgd_step, smooth_l1_per_sample, softmax_ce_per_sample

logger = logging.getLogger(__name__)

LR_PRESETS = {
    # name: (lr or None for the configured lr, step fractions, factor)
    "mlt": (None, (0.45, 0.9), 0.1),
    "finetune": (0.0005, (0.5,), 0.2),
    "coco": (None, (0.4, 0.8), 0.1),
}


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization and sampling settings for both training stages.

    Attributes:
        iterations (int): AF-RPN iterations
        e2e_iterations (int): end-to-end fine-tuning iterations
        lr (float): initial learning rate
        lr_steps (Tuple[int, ...]): iterations at which lr is multiplied by lr_factor
        lr_factor (float): step decay factor
        lr_preset (Optional[str]): "mlt", "finetune" or "coco"; overrides the steps
        momentum (float): SGD momentum
        weight_decay (float): L2 weight decay
        rpn_batch (Tuple[int, int]): (positives, negatives) per detection module
        frcnn_batch (Tuple[int, int]): (positives, negatives) per light head
        rpn_lambda (Tuple[float, float]): (lambda_cls, lambda_loc) for AF-RPN
        frcnn_lambda (Tuple[float, float]): (lambda_cls, lambda_loc) for the light heads
        ohem_rpn (bool): hard example mining for AF-RPN
        ohem_frcnn (bool): hard example mining for the light heads
        ohem_batch (int): B, candidates kept per light head under OHEM
        include_gt_proposals (bool): add GT rectangles to the stage-two proposals
        seed (int): sampling seed
        log_every (int): iterations between INFO log lines
    """

    iterations: int = 2000
    e2e_iterations: int = 1000
    lr: float = 0.001
    lr_steps: Tuple[int, ...] = (1200, 1800)
    lr_factor: float = 0.1
    lr_preset: Optional[str] = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    rpn_batch: Tuple[int, int] = (128, 128)
    frcnn_batch: Tuple[int, int] = (64, 64)
    rpn_lambda: Tuple[float, float] = (1.0, 3.0)
    frcnn_lambda: Tuple[float, float] = (1.0, 1.0)
    ohem_rpn: bool = False
    ohem_frcnn: bool = True
    ohem_batch: int = 128
    include_gt_proposals: bool = True
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 0 or self.e2e_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if min(self.rpn_batch) <= 0 or min(self.frcnn_batch) <= 0 or self.ohem_batch <= 0:
            raise ValueError("batch counts must be > 0")
        if min(self.rpn_lambda) < 0 or min(self.frcnn_lambda) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr_preset is not None and self.lr_preset not in LR_PRESETS:
            raise ValueError(f"Unknown lr_preset {self.lr_preset!r}; choose from {sorted(LR_PRESETS)}")


def resolve_schedule(cfg: TrainConfig, iterations: int) -> Tuple[float, Tuple[int, ...], float]:
    """Concrete (lr, steps, factor) for a run of `iterations`, applying any preset."""
    if cfg.lr_preset is None:
        return cfg.lr, tuple(cfg.lr_steps), cfg.lr_factor
    lr, fractions, factor = LR_PRESETS[cfg.lr_preset]
    steps = tuple(int(round(f * iterations)) for f in fractions)
    return (cfg.lr if lr is None else lr), steps, factor


def lr_at(iteration: int, base_lr: float, steps: Sequence[int], factor: float) -> float:
    """Step schedule: base_lr * factor ** (number of steps <= iteration)."""
    return base_lr * factor ** sum(1 for s in steps if iteration >= s)


@dataclass
class TrainLogRecord:
    """One iteration of the training log."""

    iteration: int
    phase: str
    scene_id: str
    modules: Dict[str, Dict[str, float]]
    frcnn: Dict[str, Dict[str, float]]
    total: float
    lr: float
    wall_time: float
    ohem: bool

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ModuleLoss:
    """Loss of one detection module or light head, with output gradients."""

    cls: float
    loc: float
    total: float
    grads: Tuple[np.ndarray, np.ndarray]


# ==================== Sampling ====================


def _quota_sample(
    pos_pool: np.ndarray,
    neg_pool: np.ndarray,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    if neg_pool.size == 0:
        raise EmptyBatch("no negative samples available")
    if pos_pool.size > n_pos:
        pos = rng.choice(pos_pool, size=n_pos, replace=False)
    else:
        pos = pos_pool
    want_neg = n_pos + n_neg - pos.size
    if neg_pool.size > want_neg:
        neg = rng.choice(neg_pool, size=want_neg, replace=False)
    else:
        neg = neg_pool
    return np.sort(pos).astype(np.int64), np.sort(neg).astype(np.int64)


def sample_sliding_points(
    level_labels: LevelLabels,
    n_pos: int = 128,
    n_neg: int = 128,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample positive and negative cells of one level without replacement.

    When fewer than n_pos positives exist, all are taken and extra
    negatives fill the batch up to n_pos + n_neg (capped by availability).
    IGNORE cells are never sampled.

    Returns:
        (positive flat indices, negative flat indices), sorted

    Raises:
        EmptyBatch: no negative cells
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    flat = level_labels.classes.reshape(-1)
    return _quota_sample(np.flatnonzero(flat == POSITIVE), np.flatnonzero(flat == NEGATIVE), n_pos, n_neg, rng)


def sample_proposals(
    labels: Sequence[Stage2Label],
    n_pos: int = 64,
    n_neg: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Proposal counterpart of sample_sliding_points(); excluded proposals are never sampled."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kinds = np.array([lb.label for lb in labels], dtype=np.int64)
    return _quota_sample(np.flatnonzero(kinds == STAGE2_POSITIVE), np.flatnonzero(kinds == STAGE2_NEGATIVE), n_pos, n_neg, rng)


def ohem_select(losses: Sequence[float], b: int) -> np.ndarray:
    """
    Indices of the b highest losses (lower index wins ties), sorted.

    When b >= len(losses) every index is returned.
    """
    losses = np.asarray(losses, dtype=np.float64)
    order = np.argsort(-losses, kind="stable")[:b]
    return np.sort(order)


# ==================== Losses ====================


def multitask_loss(l_cls: float, l_loc: float, lambda_cls: float = 1.0, lambda_loc: float = 3.0) -> float:
    return lambda_cls * l_cls + lambda_loc * l_loc


def rpn_module_loss(
    scores: np.ndarray,
    offsets: np.ndarray,
    level_labels: LevelLabels,
    sample: Tuple[np.ndarray, np.ndarray],
    lambda_cls: float = 1.0,
    lambda_loc: float = 3.0,
    weights: Optional[np.ndarray] = None,
) -> ModuleLoss:
    """
    Loss of one detection module on its sampled cells.

    Args:
        scores: 1 x 2 x H x W logits
        offsets: 1 x 8 x H x W predicted offsets
        level_labels: labels of the level
        sample: (positive, negative) flat cell indices
        lambda_cls, lambda_loc: loss weights
        weights: optional per-sample weights over positives then negatives

    Returns:
        ModuleLoss whose grads match the shapes of scores and offsets.
        Regression uses positives only; no positives gives L_loc = 0.
    """
    pos, neg = sample
    idx = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
    w = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=np.float64)

    logits = scores[0].reshape(2, -1).T
    ce = SoftmaxCrossEntropy()
    l_cls = ce.forward(logits[idx], labels, w)
    dlogits_s = ce.backward() * lambda_cls

    pred = offsets[0].reshape(8, -1).T
    target = level_labels.targets.reshape(-1, 8)
    sl1 = SmoothL1()
    l_loc = sl1.forward(pred[pos], target[pos], w[:pos.size])
    dpred_s = sl1.backward() * lambda_loc

    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, idx, dlogits_s)
    dpred = np.zeros_like(pred)
    np.add.at(dpred, pos, dpred_s)
    dscore = dlogits.T.reshape(scores.shape)
    doffset = dpred.T.reshape(offsets.shape)
    return ModuleLoss(l_cls, l_loc, multitask_loss(l_cls, l_loc, lambda_cls, lambda_loc), (dscore, doffset))


def frcnn_level_loss(
    cls_logits: np.ndarray,
    reg: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    lambda_cls: float = 1.0,
    lambda_loc: float = 1.0,
) -> ModuleLoss:
    """
    Light-head loss over R rois.

    Args:
        cls_logits: R x 2
        reg: R x 8
        labels: R labels in {0, 1}
        targets: R x 8 (rows of negatives are ignored)
        weights: R weights; zero-weight rows receive no gradient
    """
    ce = SoftmaxCrossEntropy()
    l_cls = ce.forward(cls_logits, labels, weights)
    dcls = ce.backward() * lambda_cls
    pos = labels == STAGE2_POSITIVE
    sl1 = SmoothL1()
    l_loc = sl1.forward(reg[pos], targets[pos], weights[pos])
    dreg = np.zeros_like(reg)
    dreg[pos] = sl1.backward() * lambda_loc
    return ModuleLoss(l_cls, l_loc, multitask_loss(l_cls, l_loc, lambda_cls, lambda_loc), (dcls, dreg))


def frcnn_loss(level_losses: Dict[str, ModuleLoss]) -> float:
    """Sum of the per-level light-head losses."""
    return float(sum(l.total for l in level_losses.values()))


# ==================== Trainer ====================


class Trainer:
    """
    Drives one training stage over a list of scenes.

    Attributes:
        model (AfrpnModel): network being trained
        spec (PyramidSpec): pyramid used for labels and decoding
        cfg (TrainConfig): optimization settings
        proposal_cfg (Dict): n1, n2, nms_threshold, nms_mode, score_floor, pos_iou, neg_iou
    """

    def __init__(
        self,
        model: AfrpnModel,
        spec: PyramidSpec,
        cfg: TrainConfig,
        proposal_cfg: Optional[Dict] = None,
        meta: Optional[Dict] = None,
    ):
        self.model = model
        self.spec = spec
        self.cfg = cfg
        self.proposal_cfg = {
            "score_floor": 0.1, "n1": 2000, "n2": 300, "nms_threshold": 0.7,
            "nms_mode": "aabb", "pos_iou": 0.5, "neg_iou": 0.3,
        }
        self.proposal_cfg.update(proposal_cfg or {})
        self.meta = dict(meta or {})
        self._labels: Dict[int, LabelMap] = {}

    # ---------- helpers ----------

    def iteration_rng(self, iteration: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration])

    def scene_index(self, iteration: int, n_scenes: int) -> int:
        epoch, pos = divmod(iteration, n_scenes)
        perm = np.random.default_rng([self.cfg.seed, epoch, 1]).permutation(n_scenes)
        return int(perm[pos])

    def labels_for(self, index: int, scene) -> LabelMap:
        if index not in self._labels:
            self._labels[index] = generate_labels(scene.instances, scene.size, self.spec)
        return self._labels[index]

    # ---------- one iteration ----------

    def rpn_losses(self, outputs, label_map: LabelMap, rng: np.random.Generator) -> Dict[str, ModuleLoss]:
        n_pos, n_neg = self.cfg.rpn_batch
        lam_cls, lam_loc = self.cfg.rpn_lambda
        losses = {}
        for level in self.spec.levels:
            name = level.name
            lv = label_map[name]
            try:
                if self.cfg.ohem_rpn:
                    flat = lv.classes.reshape(-1)
                    pos_all = np.flatnonzero(flat == POSITIVE)
                    neg_all = np.flatnonzero(flat == NEGATIVE)
                    if neg_all.size == 0:
                        raise EmptyBatch("no negative samples available")
                    per = self._rpn_candidate_losses(outputs, lv, name, pos_all, neg_all, lam_loc)
                    keep = ohem_select(per, n_pos + n_neg)
                    w = np.zeros(per.size)
                    w[keep] = 1.0
                    sample = (pos_all, neg_all)
                    losses[name] = rpn_module_loss(outputs.scores[name], outputs.offsets[name], lv, sample, lam_cls, lam_loc, w)
                else:
                    sample = sample_sliding_points(lv, n_pos, n_neg, rng)
                    losses[name] = rpn_module_loss(outputs.scores[name], outputs.offsets[name], lv, sample, lam_cls, lam_loc)
            except EmptyBatch:
                logger.warning(f"{name}: no negative sliding points, module skipped this iteration")
        return losses

    @staticmethod
    def _rpn_candidate_losses(outputs, lv: LevelLabels, name: str, pos: np.ndarray, neg: np.ndarray, lam_loc: float) -> np.ndarray:
        idx = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(pos.size, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
        logits = outputs.scores[name][0].reshape(2, -1).T[idx]
        per = softmax_ce_per_sample(logits, labels)
        pred = outputs.offsets[name][0].reshape(8, -1).T[pos]
        per[:pos.size] += lam_loc * smooth_l1_per_sample(pred, lv.targets.reshape(-1, 8)[pos])
        return per

    def stage2_proposals(self, outputs, scene) -> List[Proposal]:
        pc = self.proposal_cfg
        per_module = decode_dense(outputs, self.spec, pc["score_floor"])
        selected = select_for_stage2(per_module, pc["n1"], pc["n2"], pc["nms_threshold"], pc["nms_mode"])
        if self.cfg.include_gt_proposals:
            for inst in scene.instances:
                if not inst.ignore:
                    selected.append(Proposal(inst.rect.quad, 1.0, "GT"))
        return selected

    def frcnn_losses(self, outputs, scene, rng: np.random.Generator) -> Tuple[Dict[str, ModuleLoss], Dict]:
        pc = self.proposal_cfg
        lam_cls, lam_loc = self.cfg.frcnn_lambda
        n_pos, n_neg = self.cfg.frcnn_batch
        groups = route_proposals(self.stage2_proposals(outputs, scene), self.spec)
        losses, grads = {}, {}
        for name, group in groups.items():
            if not group:
                continue
            labels = assign_stage2_labels(group, scene.instances, self.spec, name, pc["pos_iou"], pc["neg_iou"])
            kinds = np.array([lb.label for lb in labels])
            try:
                if self.cfg.ohem_frcnn:
                    cand = np.flatnonzero(kinds >= 0)
                    if not np.any(kinds[cand] == STAGE2_NEGATIVE):
                        raise EmptyBatch("no negative proposals available")
                else:
                    pos, neg = sample_proposals(labels, n_pos, n_neg, rng)
                    cand = np.concatenate([pos, neg])
            except EmptyBatch:
                logger.debug(f"{name}: no negative proposals, light head skipped this iteration")
                continue
            rois = np.array([group[i].aabb.as_tuple() for i in cand])
            y = kinds[cand].astype(np.int64)
            t = np.stack([labels[i].targets if labels[i].targets is not None else np.zeros(8) for i in cand])
            cls_logits, reg = self.model.lighthead_forward(name, rois)
            w = np.ones(cand.size)
            if self.cfg.ohem_frcnn:
                per = softmax_ce_per_sample(cls_logits, y)
                pos_mask = y == STAGE2_POSITIVE
                per[pos_mask] += lam_loc * smooth_l1_per_sample(reg[pos_mask], t[pos_mask])
                w = np.zeros(cand.size)
                w[ohem_select(per, self.cfg.ohem_batch)] = 1.0
            loss = frcnn_level_loss(cls_logits, reg, y, t, w, lam_cls, lam_loc)
            losses[name] = loss
            grads[name] = loss.grads
        return losses, grads

    def step(self, iteration: int, scenes: Sequence, phase: str, base_lr: float, steps, factor) -> TrainLogRecord:
        """Run one SGD iteration and return its log record."""
        t0 = time.perf_counter()
        rng = self.iteration_rng(iteration)
        index = self.scene_index(iteration, len(scenes))
        scene = scenes[index]
        label_map = self.labels_for(index, scene)

        self.model.zero_grad()
        outputs = self.model.forward(scene.image[None])
        rpn = self.rpn_losses(outputs, label_map, rng)
        frcnn, lh_grads = ({}, None)
        if phase == "e2e":
            frcnn, lh_grads = self.frcnn_losses(outputs, scene, rng)
        total = float(sum(l.total for l in rpn.values())) + frcnn_loss(frcnn)
        lr = lr_at(iteration, base_lr, steps, factor)

        record = TrainLogRecord(
            iteration=iteration,
            phase=phase,
            scene_id=scene.id,
            modules={n: {"cls": l.cls, "loc": l.loc, "total": l.total} for n, l in rpn.items()},
            frcnn={n: {"cls": l.cls, "loc": l.loc, "total": l.total} for n, l in frcnn.items()},
            total=total,
            lr=lr,
            wall_time=0.0,
            ohem=self.cfg.ohem_frcnn if phase == "e2e" else self.cfg.ohem_rpn,
        )
        values = [total] + [v for m in list(record.modules.values()) + list(record.frcnn.values()) for v in m.values()]
        if not all(math.isfinite(v) for v in values):
            diag = record.to_dict()
            diag["reason"] = "non-finite loss"
            logger.error(f"Non-finite loss at iteration {iteration} on {scene.id}: {json.dumps(diag, default=str)}")
            raise NumericalFailure(f"non-finite loss at iteration {iteration}", diag)

        self.model.backward({n: l.grads for n, l in rpn.items()}, lh_grads)
        params = self.model.parameters(include_lightheads=(phase == "e2e"))
        sgd_step(params, lr, self.cfg.momentum, self.cfg.weight_decay)
        record.wall_time = time.perf_counter() - t0
        return record

    def run(
        self,
        scenes: Sequence,
        phase: str,
        iterations: int,
        start_iteration: int = 0,
        log_path: Optional[Union[str, Path]] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ) -> List[TrainLogRecord]:
        """
        Train for iterations [start_iteration, iterations).

        Returns:
            The log records of this run, in iteration order
        """
        if not scenes:
            raise EmptyBatch("training needs at least one scene")
        base_lr, steps, factor = resolve_schedule(self.cfg, iterations)
        logger.info(f"Training {phase}: {iterations} iterations on {len(scenes)} scenes, "
                    f"lr {base_lr} steps {steps} x{factor}, ohem={'on' if (self.cfg.ohem_frcnn if phase == 'e2e' else self.cfg.ohem_rpn) else 'off'}")
        records = []
        log_fh = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_fh = open(log_path, "a" if start_iteration else "w", encoding="utf-8")
        try:
            for it in tqdm(range(start_iteration, iterations), desc=phase, disable=not progress):
                record = self.step(it, scenes, phase, base_lr, steps, factor)
                records.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                if self.cfg.log_every and it % self.cfg.log_every == 0:
                    logger.info(f"[{phase}] iter {it}: loss {record.total:.4f} lr {record.lr:g}")
        finally:
            if log_fh is not None:
                log_fh.close()
        if checkpoint_path is not None:
            meta = dict(self.meta)
            meta.update({"phase": phase, "iteration": iterations})
            save_checkpoint(checkpoint_path, self.model.parameters(), meta)
        logger.info(f"✓ {phase} training finished at iteration {iterations}")
        return records


def train_afrpn(
    scenes: Sequence,
    model: AfrpnModel,
    spec: PyramidSpec,
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    proposal_cfg: Optional[Dict] = None,
    meta: Optional[Dict] = None,
    start_iteration: int = 0,
    progress: bool = False,
) -> List[TrainLogRecord]:
    """
    Stage one: train backbone, neck and the three detection heads.

    Raises:
        NumericalFailure: a loss became non-finite
    """
    trainer = Trainer(model, spec, cfg, proposal_cfg, meta)
    return trainer.run(scenes, "afrpn", cfg.iterations, start_iteration, log_path, checkpoint_path, progress)


def train_end2end(
    scenes: Sequence,
    model: AfrpnModel,
    spec: PyramidSpec,
    cfg: TrainConfig,
    init: Optional[Union[str, Path]],
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    proposal_cfg: Optional[Dict] = None,
    meta: Optional[Dict] = None,
    progress: bool = False,
) -> List[TrainLogRecord]:
    """
    Stage two: approximate end-to-end fine-tuning from an AF-RPN checkpoint.

    Proposal coordinates are constants for the light-head losses; the
    total loss is the AF-RPN loss plus the light-head loss.

    Raises:
        UsageError: no init checkpoint
        CompatError: checkpoint does not fit the model
        NumericalFailure: a loss became non-finite
    """
    if init is None:
        raise UsageError("end-to-end training needs an AF-RPN checkpoint to start from")
    arrays, _ = load_checkpoint(init)
    model.load_arrays({k: v for k, v in arrays.items() if not k.endswith("#momentum")})
    trainer = Trainer(model, spec, cfg, proposal_cfg, meta)
    return trainer.run(scenes, "e2e", cfg.e2e_iterations, 0, log_path, checkpoint_path, progress)
