# app/main.py

from __future__ import annotations

import argparse
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.core.config import load_run_config
from app.core.constants import (
    CATEGORY_VALIDATION,
    DECODING_STRATEGIES,
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    SPLIT_NAMES,
    TRAIN_SPLITS,
)
from app.core.errors import ScordError
from app.services.evaluation import format_table
from app.services.pipeline_service import PipelineService
from app.utils.logger import get_logger, set_log_level
from app.utils.metrics import export_metrics

logger = get_logger(__name__)


# ============================================================
# ARGUMENTS
# ============================================================

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value run file")
    common.add_argument("--seed", type=int, help="global seed (sub-seeds derive from it)")
    common.add_argument("--jobs", type=int, help="decoding workers")
    common.add_argument("--k", type=int, help="beam width / number of predictions")
    common.add_argument("--iou", help="comma-separated IoU thresholds")
    common.add_argument("--out", help="output path")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="scord",
        description="Subject-conditional relation detection lab",
    )
    commands = parser.add_subparsers(dest="command", metavar="<command>")
    commands.required = True

    commands.add_parser("gen-synthetic", parents=[common], help="render a synthetic shape corpus")
    commands.add_parser("extract-triplets", parents=[common], help="caption -> triplet extraction")
    commands.add_parser("build-splits", parents=[common], help="Rel-Obj sets, benchmark splits, vocabulary")

    train = commands.add_parser("train", parents=[common], help="train one model")
    train.add_argument("--split", choices=sorted(TRAIN_SPLITS), default="text_aug")

    predict = commands.add_parser("predict", parents=[common], help="decode the full test split")
    predict.add_argument("--model", default="text_aug", help="checkpoint name or .pt path")
    predict.add_argument("--strategy", choices=sorted(DECODING_STRATEGIES))

    evaluate = commands.add_parser("evaluate", parents=[common], help="Recall@K report")
    evaluate.add_argument("--model", default="text_aug")
    evaluate.add_argument("--predictions", help="prediction file (defaults to the model's)")
    evaluate.add_argument("--allow-partial", action="store_true", help="score despite unmatched sample ids")

    inspect = commands.add_parser("inspect", parents=[common], help="pretty-print a record file")
    inspect.add_argument("path")

    experiment = commands.add_parser("experiment", parents=[common], help="base vs text-augmented, per seed")
    experiment.add_argument("--seeds", help="comma-separated seeds")

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "jobs": args.jobs,
        "decode.k": args.k,
        "eval.iou_thresholds": args.iou,
        "experiment.seeds": getattr(args, "seeds", None),
    }


# ============================================================
# DISPATCH
# ============================================================

def _run(args: argparse.Namespace) -> List[str]:
    config = load_run_config(args.config, _overrides(args))
    set_log_level(config.log_level)
    service = PipelineService(config)
    command = args.command

    if command == "gen-synthetic":
        counts = service.gen_synthetic()
        lines = [f"{name}: {value}" for name, value in counts.items()]
    elif command == "extract-triplets":
        counts = service.extract_triplets()
        lines = [f"{name}: {value}" for name, value in counts.items()]
    elif command == "build-splits":
        splits = service.build_splits()
        lines = [f"set_a: {len(splits.set_a)} pairs", f"set_b: {len(splits.set_b)} pairs"]
        lines += [f"{name}: {len(splits.by_name(name))}" for name in SPLIT_NAMES]
    elif command == "train":
        _, history = service.train(args.split)
        final = f"{history[-1]:.4f}" if history else "n/a"
        lines = [f"trained '{args.split}': {len(history)} epochs, final loss {final}"]
    elif command == "predict":
        predictions = service.predict(args.model, k=args.k, strategy=args.strategy, out=args.out)
        lines = [f"decoded {len(predictions)} samples"]
    elif command == "evaluate":
        report = service.evaluate(
            args.model, predictions_file=args.predictions, out=args.out, allow_partial=args.allow_partial
        )
        lines = format_table(report).splitlines()
    elif command == "inspect":
        lines = service.inspect(args.path)
    else:
        lines = service.experiment().splitlines()

    export_metrics(config.paths.metrics)
    return lines


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        lines = _run(args)
    except ScordError as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValidationError as exc:
        first = exc.errors()[0]
        message = f"{'.'.join(str(p) for p in first['loc'])}: {first['msg']}"
        logger.error(f"{args.command} failed: {message}")
        print(f"error[{CATEGORY_VALIDATION}]: {message}", file=sys.stderr)
        return EXIT_FAILURE

    for line in lines:
        print(line)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
