#!/usr/bin/env python3
"""
AF-RPN Command Line.

This module provides the single executable of the project:
- synth:       write a synthetic dataset
- labels:      dump per-level label grids and overlays
- train-rpn:   train AF-RPN
- train-e2e:   fine-tune AF-RPN + light heads from an AF-RPN checkpoint
- propose:     proposals (JSON lines) at one or more test scales
- detect:      final detections after Skewed NMS
- eval:        recall report (and PRF with --prf)
- gradcheck:   finite-difference gradient suite
- scale-check: lower bound / stride per pyramid level
- scale-sweep: proposal recall on downsampled scenes
- render:      SVG overlays of GT and predictions

Exit codes:
    0 success, 1 usage, 2 data error, 3 numerical failure
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pipeline.orchestrator import PipelineOrchestrator
from scripts.config import AfrpnConfig, load_config, resolve_test_scales
from scripts.errors import (
    AfrpnError,
    CompatError,
    DegenerateQuad,
    FormatError,
    JoinError,
    NumericalFailure,
    ParseError,
    UsageError,
)
from scripts.gradcheck import TOLERANCE, run_suite, worst_per_layer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (default: $AFRPN_CONFIG or config.yaml)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting, e.g. --set training.iterations=200")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default: $AFRPN_LOG_LEVEL or INFO)")
    common.add_argument("--workers", type=int, help="worker threads for per-scene jobs")

    parser = CliParser(prog="afrpn", description="Anchor-free region proposals for multi-oriented text.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("labels", parents=[common], help="dump label grids (PGM) and overlays (SVG)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    for name, helptext in (("train-rpn", "train AF-RPN"), ("train-e2e", "end-to-end fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint manifest to write")
        p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
        p.add_argument("--progress", action="store_true", help="show a progress bar")
        if name == "train-e2e":
            p.add_argument("--init", help="AF-RPN checkpoint to start from")

    for name, helptext in (("propose", "write proposals"), ("detect", "write final detections")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--scale", nargs="+", help="shorter-side test scale(s), e.g. 512 800 1280")
        p.add_argument("--out", required=True)
        if name == "detect":
            p.add_argument("--raw", action="store_true", help="emit top-scoring proposals instead (baseline)")

    p = sub.add_parser("eval", parents=[common], help="recall report")
    p.add_argument("--gt", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--mode", choices=("aabb", "quad"))
    p.add_argument("--prf", help="detections file for precision / recall / F")
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--corrupt", action="store_true", help="self-test with a wrong conv gradient")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("scale-check", parents=[common], help="lower bound / stride per level")
    p.add_argument("--out", help="JSON output path")

    p = sub.add_parser("scale-sweep", parents=[common], help="proposal recall on downsampled scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--factors", nargs="+", type=float)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("render", parents=[common], help="SVG overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--predictions")
    return parser


# ==================== Commands ====================


def cmd_synth(orch: PipelineOrchestrator, args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    path = orch.synth(args.out, args.count, args.seed)
    print(f"✓ Wrote {args.count} scenes, manifest {path}")
    return EXIT_OK


def cmd_labels(orch: PipelineOrchestrator, args) -> int:
    path = orch.dump_labels(args.data, args.out)
    print(f"✓ Labels written, summary {path}")
    return EXIT_OK


def cmd_train_rpn(orch: PipelineOrchestrator, args) -> int:
    records = orch.train_rpn(args.data, args.out, args.log, args.progress)
    if records:
        print(f"✓ Trained {len(records)} iterations, final loss {records[-1].total:.4f}, checkpoint {args.out}")
    return EXIT_OK


def cmd_train_e2e(orch: PipelineOrchestrator, args) -> int:
    if not args.init:
        raise UsageError("train-e2e needs --init <AF-RPN checkpoint>")
    records = orch.train_e2e(args.data, args.init, args.out, args.log, args.progress)
    if records:
        print(f"✓ Fine-tuned {len(records)} iterations, final loss {records[-1].total:.4f}, checkpoint {args.out}")
    return EXIT_OK


def _scales(args, cfg: AfrpnConfig):
    return resolve_test_scales(args.scale) if args.scale else cfg.proposals.test_scales


def cmd_propose(orch: PipelineOrchestrator, args) -> int:
    paths = orch.predict(args.data, args.ckpt, args.out, _scales(args, orch.cfg), "proposals")
    for p in paths:
        print(f"✓ Proposals written to {p}")
    return EXIT_OK


def cmd_detect(orch: PipelineOrchestrator, args) -> int:
    kind = "raw" if args.raw else "detections"
    paths = orch.predict(args.data, args.ckpt, args.out, _scales(args, orch.cfg), kind)
    for p in paths:
        print(f"✓ Detections written to {p}")
    return EXIT_OK


def cmd_eval(orch: PipelineOrchestrator, args) -> int:
    report = orch.evaluate(args.gt, args.proposals, args.mode)
    result = report.to_dict()
    print(f"Recall over {report.n_gt} GT ({report.n_ignored} ignored) in {report.n_images} images, {report.mode} IoU")
    print(report.format_table())
    if report.group_recall:
        print("Per-group recall @0.5: " + ", ".join(f"{g}={v:.3f}" for g, v in report.group_recall.items()))
    if args.prf:
        prf = orch.evaluate_prf(args.gt, args.prf)
        result["prf"] = {"precision": prf.precision, "recall": prf.recall, "f": prf.f,
                         "tp": prf.tp, "fp": prf.fp, "n_gt": prf.n_gt}
        print(f"Detection P={prf.precision:.3f} R={prf.recall:.3f} F={prf.f:.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(orch: PipelineOrchestrator, args) -> int:
    table = run_suite(seed=args.seed, corrupt=args.corrupt)
    summary = worst_per_layer(table)
    print(summary.to_string(float_format=lambda v: f"{v:.2e}"))
    if not bool(summary["passed"].all()):
        print(f"❌ Gradient check failed (tolerance {TOLERANCE:g})")
        return EXIT_NUMERICAL
    print("✓ All gradients match")
    return EXIT_OK


def cmd_scale_check(orch: PipelineOrchestrator, args) -> int:
    table = orch.scale_check()
    print(table.to_string())
    if args.out:
        Path(args.out).write_text(table.reset_index().to_json(orient="records", indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_scale_sweep(orch: PipelineOrchestrator, args) -> int:
    table = orch.scale_sweep(args.data, args.ckpt, args.factors)
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    if args.out:
        table.to_csv(args.out)
    return EXIT_OK


def cmd_render(orch: PipelineOrchestrator, args) -> int:
    n = orch.render(args.data, args.out, args.predictions)
    print(f"✓ Rendered {n} overlays to {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "labels": cmd_labels,
    "train-rpn": cmd_train_rpn,
    "train-e2e": cmd_train_e2e,
    "propose": cmd_propose,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "scale-check": cmd_scale_check,
    "scale-sweep": cmd_scale_sweep,
    "render": cmd_render,
}


def configure_logging(level: Optional[str]):
    name = (level or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"Unknown log level {level!r}")
    logging.basicConfig(level=name, format=LOG_FORMAT, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level or os.environ.get("AFRPN_LOG_LEVEL"))
        cfg = load_config(args.config, args.overrides)
        if not (args.log_level or os.environ.get("AFRPN_LOG_LEVEL")):
            configure_logging(cfg.runtime.log_level)
        orch = PipelineOrchestrator(cfg, args.workers)
        return COMMANDS[args.command](orch, args)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ParseError, FormatError, JoinError, CompatError, DegenerateQuad, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except AfrpnError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        sys.exit(EXIT_USAGE)
