#!/usr/bin/env python3
"""
Dataset-Level Pipeline Jobs.

This module orchestrates the jobs behind each command:
- synthesize a dataset directory
- dump per-level label grids (PGM) and overlays (SVG)
- train AF-RPN, then fine-tune end to end
- run proposals / detections at one or more test scales (JSON lines)
- join predictions with ground truth and build recall / PRF reports
- scale-rule check and downsampling sweep

Jobs over independent scenes go through map_ordered(), so results are
ordered by scene id whatever the worker count.
"""

import copy
import dataclasses
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from pipeline.detector import TwoStageDetector
from scripts.config import AfrpnConfig, build_pyramid_spec, config_to_dict
from scripts.data_io import (
    Overlay,
    Scene,
    gen_scene,
    load_dataset,
    render_svg,
    resize_shorter_side,
    save_pgm,
    scene_overlays,
    write_dataset,
)
from scripts.errors import FormatError, JoinError
from scripts.evaluation import PRF, RecallReport, build_report, detection_prf, pooled_prf, scale_sweep
from scripts.labeling import IGNORE, NEGATIVE, POSITIVE, check_scale_rule, class_grid_to_pgm, generate_labels
from scripts.model import build_model
from scripts.proposals import Detection, Proposal
from scripts.training import TrainLogRecord, train_afrpn, train_end2end

logger = logging.getLogger(__name__)

PROPOSALS_SCHEMA = "afrpn.proposals/1"
DETECTIONS_SCHEMA = "afrpn.detections/1"
LABELS_SCHEMA = "afrpn.labels/1"

PathLike = Union[str, Path]


def map_ordered(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """Apply fn to every item, returning results in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ==================== Prediction files ====================


def write_predictions(
    path: PathLike,
    results: Iterable[Tuple[str, Sequence]],
    schema: str = PROPOSALS_SCHEMA,
    factors: Optional[Dict[str, float]] = None,
) -> int:
    """
    Write (scene id, items) pairs as JSON lines, one item per line.

    Coordinates are in the frame the items were produced in; `factors`
    records each scene's resize factor so readers can map back.

    Returns:
        Number of lines written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sid, items in results:
            for it in items:
                rec = {"schema": schema, "image": sid}
                rec.update(it.to_dict())
                rec["factor"] = float((factors or {}).get(sid, 1.0))
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                n += 1
    return n


def read_predictions(path: PathLike, to_original: bool = True) -> Tuple[str, Dict[str, List]]:
    """
    Read a proposals or detections file.

    Args:
        path: JSON-lines file
        to_original: divide coordinates by the recorded resize factor

    Returns:
        Tuple of (schema, scene id -> items sorted by descending score)

    Raises:
        FormatError: invalid JSON, unknown schema or mixed schemas
    """
    per_image: Dict[str, List] = {}
    schema = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: invalid JSON ({e})") from e
            s = rec.get("schema")
            if s not in (PROPOSALS_SCHEMA, DETECTIONS_SCHEMA):
                raise FormatError(f"{path}:{line_no}: unknown schema {s!r}")
            if schema is not None and s != schema:
                raise FormatError(f"{path}:{line_no}: mixed schemas {schema!r} and {s!r}")
            schema = s
            item = Proposal.from_dict(rec) if s == PROPOSALS_SCHEMA else Detection.from_dict(rec)
            factor = float(rec.get("factor", 1.0))
            if to_original and factor != 1.0:
                item = type(item)(item.quad.scaled(1.0 / factor), item.score, item.level)
            per_image.setdefault(rec["image"], []).append(item)
    for items in per_image.values():
        items.sort(key=lambda it: -it.score)
    return schema or PROPOSALS_SCHEMA, per_image


def join_with_gt(scenes: Sequence[Scene], predictions: Dict[str, List]) -> List[Tuple[Scene, List]]:
    """
    Pair every GT scene with its predictions.

    Raises:
        JoinError: predictions name a scene the GT directory lacks
    """
    ids = {s.id for s in scenes}
    unknown = sorted(set(predictions) - ids)
    if unknown:
        raise JoinError(f"predictions reference {len(unknown)} unknown scene ids, e.g. {unknown[:3]}")
    missing = [s.id for s in scenes if s.id not in predictions]
    if missing:
        logger.warning(f"{len(missing)} GT scenes have no predictions (counted as empty)")
    return [(s, predictions.get(s.id, [])) for s in scenes]


# ==================== Orchestrator ====================


class PipelineOrchestrator:
    """
    Run pipeline jobs under one resolved configuration.

    Attributes:
        cfg (AfrpnConfig): resolved configuration
        workers (int): worker threads for per-scene jobs
    """

    def __init__(self, cfg: AfrpnConfig, workers: Optional[int] = None):
        self.cfg = cfg
        self.workers = int(workers if workers is not None else cfg.runtime.workers)
        self._local = threading.local()

    def load(self, data_dir: PathLike, strict: bool = False) -> List[Scene]:
        lab = self.cfg.labeling
        return load_dataset(data_dir, strict, lab.short_factor, lab.long_factor)

    # ---------- data ----------

    def synth(self, out_dir: PathLike, count: int, seed: Optional[int] = None) -> Path:
        """Write `count` synthetic scenes; identical arguments give identical files."""
        synth_cfg = self.cfg.synth if seed is None else dataclasses.replace(self.cfg.synth, seed=seed)
        lab = self.cfg.labeling
        logger.info(f"Synthesizing {count} scenes (seed {synth_cfg.seed}) into {out_dir}")
        scenes = map_ordered(lambda i: gen_scene(synth_cfg, i, lab.short_factor, lab.long_factor), list(range(count)), self.workers)
        meta = config_to_dict(self.cfg)
        meta["synth"] = config_to_dict(synth_cfg)
        return write_dataset(scenes, out_dir, meta)

    def dump_labels(self, data_dir: PathLike, out_dir: PathLike) -> Path:
        """
        Write <id>_<level>.pgm grids, <id>_labels.svg overlays and labels.json counts.

        Returns:
            Path of labels.json
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scenes = self.load(data_dir)
        spec = build_pyramid_spec(self.cfg)

        def one(scene: Scene) -> Dict:
            label_map = generate_labels(scene.instances, scene.size, spec)
            levels = {}
            for name, lv in label_map.levels.items():
                save_pgm(class_grid_to_pgm(lv.classes), out / f"{scene.id}_{name}.pgm")
                levels[name] = {
                    "shape": list(lv.shape),
                    "positive": lv.count(POSITIVE),
                    "ignore": lv.count(IGNORE),
                    "negative": lv.count(NEGATIVE),
                }
            svg = render_svg(scene, scene_overlays(scene), image_href=f"{scene.id}.ppm")
            (out / f"{scene.id}_labels.svg").write_text(svg, encoding="utf-8")
            return {"id": scene.id, "levels": levels}

        entries = map_ordered(one, scenes, self.workers)
        path = out / "labels.json"
        path.write_text(json.dumps({"schema": LABELS_SCHEMA, "scenes": entries}, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        logger.info(f"✓ Dumped labels for {len(entries)} scenes to {out}")
        return path

    # ---------- training ----------

    def train_rpn(self, data_dir: PathLike, out_ckpt: PathLike, log_path: Optional[PathLike] = None,
                  progress: bool = False) -> List[TrainLogRecord]:
        scenes = self.load(data_dir)
        model = build_model(self.cfg.model, self.cfg.runtime.seed)
        spec = build_pyramid_spec(self.cfg, model)
        log_path = log_path or f"{out_ckpt}.log.jsonl"
        return train_afrpn(scenes, model, spec, self.cfg.training, log_path, out_ckpt,
                           self.cfg.proposals.selection_kwargs(), {"config": config_to_dict(self.cfg)},
                           progress=progress)

    def train_e2e(self, data_dir: PathLike, init: Optional[PathLike], out_ckpt: PathLike,
                  log_path: Optional[PathLike] = None, progress: bool = False) -> List[TrainLogRecord]:
        scenes = self.load(data_dir)
        model = build_model(self.cfg.model, self.cfg.runtime.seed)
        spec = build_pyramid_spec(self.cfg, model)
        log_path = log_path or f"{out_ckpt}.log.jsonl"
        return train_end2end(scenes, model, spec, self.cfg.training, init, log_path, out_ckpt,
                             self.cfg.proposals.selection_kwargs(), {"config": config_to_dict(self.cfg)},
                             progress=progress)

    # ---------- inference ----------

    def _detector(self, prototype: TwoStageDetector) -> TwoStageDetector:
        """Per-thread copy of the detector (layers cache activations)."""
        if self.workers <= 1:
            return prototype
        det = getattr(self._local, "detector", None)
        if det is None:
            det = copy.deepcopy(prototype)
            self._local.detector = det
        return det

    def run_inference(
        self,
        detector: TwoStageDetector,
        scenes: Sequence[Scene],
        scale: Optional[int],
        kind: str = "proposals",
    ) -> Tuple[List[Tuple[str, List]], Dict[str, float]]:
        """
        Proposals or detections for every scene at one test scale.

        Args:
            detector: loaded detector
            scenes: input scenes
            scale: shorter-side test scale, or None for native size
            kind: "proposals", "detections" or "raw" (proposal baseline)

        Returns:
            Tuple of ([(scene id, items)], scene id -> resize factor)
        """
        self._local = threading.local()

        def one(scene: Scene):
            resized = resize_shorter_side(scene, scale) if scale else scene
            factor = scale / min(scene.content_size) if scale else 1.0
            det = self._detector(detector)
            if kind == "proposals":
                items = det.propose(resized)
            elif kind == "detections":
                items = det.detect(resized)
            elif kind == "raw":
                items = det.raw_detections(resized)
            else:
                raise ValueError(f"Unknown inference kind {kind!r}")
            return scene.id, items, factor

        out = map_ordered(one, list(scenes), self.workers)
        results = [(sid, items) for sid, items, _ in out]
        factors = {sid: f for sid, _, f in out}
        logger.info(f"✓ {kind} for {len(results)} scenes at scale {scale or 'native'}: "
                    f"{sum(len(i) for _, i in results)} items")
        return results, factors

    def predict(
        self,
        data_dir: PathLike,
        ckpt: PathLike,
        out: PathLike,
        scales: Sequence[Optional[int]] = (None,),
        kind: str = "proposals",
    ) -> List[Path]:
        """
        Write one JSON-lines file per scale.

        With several scales the files are named <stem>_s<scale><suffix>.

        Raises:
            CompatError: checkpoint does not fit the configured model
        """
        detector = TwoStageDetector.from_checkpoint(ckpt, self.cfg)
        scenes = self.load(data_dir)
        schema = PROPOSALS_SCHEMA if kind == "proposals" else DETECTIONS_SCHEMA
        out = Path(out)
        paths = []
        for scale in scales:
            path = out if len(scales) == 1 else out.with_name(f"{out.stem}_s{scale}{out.suffix}")
            results, factors = self.run_inference(detector, scenes, scale, kind)
            write_predictions(path, results, schema, factors)
            paths.append(path)
        return paths

    # ---------- evaluation ----------

    def evaluate(self, gt_dir: PathLike, predictions_path: PathLike, mode: Optional[str] = None) -> RecallReport:
        """
        Recall report for a proposals file against a GT directory.

        Raises:
            JoinError: predictions name unknown scenes
        """
        scenes = self.load(gt_dir)
        _, preds = read_predictions(predictions_path)
        pairs = join_with_gt(scenes, preds)
        return build_report([(s.instances, items) for s, items in pairs], self.cfg.eval.ks,
                            mode or self.cfg.eval.iou_mode, build_pyramid_spec(self.cfg))

    def evaluate_prf(self, gt_dir: PathLike, detections_path: PathLike, mode: Optional[str] = None) -> PRF:
        scenes = self.load(gt_dir)
        _, preds = read_predictions(detections_path)
        pairs = join_with_gt(scenes, preds)
        ev = self.cfg.eval
        return pooled_prf([detection_prf(items, s.instances, ev.prf_iou, mode or ev.prf_mode) for s, items in pairs])

    # ---------- analysis ----------

    def scale_check(self) -> pd.DataFrame:
        return pd.DataFrame(check_scale_rule(build_pyramid_spec(self.cfg))).set_index("level")

    def scale_sweep(self, data_dir: PathLike, ckpt: PathLike, factors: Optional[Sequence[float]] = None) -> pd.DataFrame:
        detector = TwoStageDetector.from_checkpoint(ckpt, self.cfg)
        scenes = self.load(data_dir)
        return scale_sweep(detector.propose, scenes, factors or self.cfg.eval.sweep_factors,
                           max(self.cfg.eval.ks), self.cfg.eval.iou_mode, detector.spec)

    def render(self, data_dir: PathLike, out_dir: PathLike, predictions_path: Optional[PathLike] = None) -> int:
        """Write <id>.svg overlays of GT (and predictions when given); returns the file count."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scenes = self.load(data_dir)
        preds: Dict[str, List] = {}
        schema = PROPOSALS_SCHEMA
        if predictions_path is not None:
            schema, preds = read_predictions(predictions_path)
            join_with_gt(scenes, preds)
        kind = "proposal" if schema == PROPOSALS_SCHEMA else "detection"
        for scene in scenes:
            overlays = scene_overlays(scene)
            overlays += [Overlay(it.quad, kind, f"{it.score:.2f}") for it in preds.get(scene.id, [])]
            (out / f"{scene.id}.svg").write_text(render_svg(scene, overlays, f"{scene.id}.ppm"), encoding="utf-8")
        logger.info(f"✓ Rendered {len(scenes)} overlays to {out}")
        return len(scenes)
