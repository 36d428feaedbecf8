#!/usr/bin/env python
"""
Command-line interface for CvS
"""

import argparse
import sys
from typing import Dict, List, Optional

from loguru import logger

from .config import settings
from .config.run_config import RunConfig
from .cost_analysis import AnnotationRates, rates_for
from .datasets import ALL
from .exceptions import CvsError, DatasetLoadError
from .main import (
    cost_report,
    evaluate_checkpoint,
    prepare_labels,
    run_grid,
    train_method,
    train_seg_model,
)
from .utils.helpers import setup_logging

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _m_value(text: str):
    if text.lower() == ALL:
        return ALL
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"M must be a positive integer or 'all', got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"M must be >= 1, got {value}")
    return value


def _common_parser() -> argparse.ArgumentParser:
    """Options shared by every subcommand that reads a run config."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", "-c", help="JSON run config (CLI flags override it)")
    parser.add_argument("--output", "-o", help=f"Output directory (default: under {settings.OUTPUT_ROOT})")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    data = parser.add_argument_group("dataset")
    data.add_argument("--dataset", help=f"Dataset name; built in: {', '.join(settings.BUILTIN_DATASETS)}")
    data.add_argument("--manifest", help="Training manifest (id, image, label, mask)")
    data.add_argument("--test-manifest", help="Test manifest")
    data.add_argument("--num-classes", type=int, help="P for manifest datasets")
    data.add_argument("--image-shape", type=int, nargs=3, metavar=("H", "W", "C"), help="Shape for manifest datasets")
    data.add_argument("--size", type=int, help="Expected training sample count")
    data.add_argument("--test-size", type=int, help="Expected test sample count")
    data.add_argument("--binary-masks", action="store_true", default=None,
                      help="Masks on disk are {0,1} vessel-style maps")
    data.add_argument("--input-size", type=int, help="Resize images to this side length")
    data.add_argument("--m", type=_m_value, help="Samples per class, or 'all'")

    labels = parser.add_argument_group("labels")
    labels.add_argument("--label-mode", choices=["manual", "binarize", "propagate"], help="Where masks come from")
    labels.add_argument("--seg-model", help="Seg-M run directory for propagation")
    labels.add_argument("--threshold", type=float, help="Binarization threshold")
    labels.add_argument("--keep-manual", dest="keep_manual", action="store_true", default=None,
                        help="Keep manual masks over propagated ones")
    labels.add_argument("--no-keep-manual", dest="keep_manual", action="store_false")
    labels.add_argument("--seg-labeled", type=int, help="Manual segmentations behind propagated masks")

    net = parser.add_argument_group("network")
    net.add_argument("--backbone", choices=settings.BACKBONES)
    net.add_argument("--depth", type=int, help="Wide ResNet depth")
    net.add_argument("--width", type=int, help="Wide ResNet width")
    net.add_argument("--dropout", type=float)
    net.add_argument("--pretrained", action="store_true", default=None, help="Load local ResNet-101 weights")

    opt = parser.add_argument_group("training")
    opt.add_argument("--seed", type=int, help="Root seed")
    opt.add_argument("--epochs", type=int)
    opt.add_argument("--batch-size", type=int, choices=settings.ALLOWED_BATCH_SIZES)
    opt.add_argument("--lr", type=float)
    opt.add_argument("--momentum", type=float)
    opt.add_argument("--weight-decay", type=float)
    opt.add_argument("--lr-schedule", choices=["cosine", "constant"])
    opt.add_argument("--mtl-lambda", type=float)
    opt.add_argument("--device", help="cpu or cuda")
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvs",
        description="Classification via segmentation: label synthesis, training, evaluation and cost reports",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Binarize MNIST into a masked manifest
  python -m cvs prepare-labels --mode binarize --dataset mnist -o runs/mnist-labels

  # Train Seg-5 on synthetic shapes and propagate its masks
  python -m cvs train-seg --dataset synthetic-shapes --m 5 -o runs/seg-5
  python -m cvs propagate --dataset synthetic-shapes --seg-model runs/seg-5 -o runs/shapes-propagated

  # Train and evaluate CvS with 10 samples per class
  python -m cvs train --method cvs --dataset mnist --label-mode binarize --m 10 -o runs/cvs-10
  python -m cvs evaluate --checkpoint runs/cvs-10 --dataset mnist --label-mode binarize

  # Grid and cost curve
  python -m cvs grid --dataset mnist --label-mode binarize --methods cvs classification --m-values 1 5 10
  python -m cvs cost-report --results runs/grid/results.tsv --dataset cifar10
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    p = sub.add_parser("prepare-labels", parents=[common], help="Write masks by binarization or propagation")
    p.add_argument("--mode", choices=["binarize", "propagate"], required=True)
    p.set_defaults(func=cmd_prepare_labels)

    p = sub.add_parser("train-seg", parents=[common], help="Train a Seg-M model")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train", parents=[common], help="Train one method")
    p.add_argument("--method", choices=settings.METHODS, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", parents=[common], help="Propagate Seg-M masks to a dataset")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("evaluate", parents=[common], help="Evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True, help="Training run or checkpoint directory")
    p.add_argument("--report", help="Report path (default: eval_report.json in the run)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", parents=[common], help="Run a (method, M, seed) grid")
    p.add_argument("--methods", nargs="+", choices=settings.METHODS, default=["cvs", "classification"])
    p.add_argument("--m-values", nargs="+", type=_m_value, default=[1, 5, 10])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--folds", type=int, help="k-fold cross-validation instead of M subsets")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("cost-report", help="Cost-vs-accuracy rows from a results table")
    p.add_argument("--results", required=True, help="results.tsv from a grid")
    p.add_argument("--dataset", default="cifar10", help="Rate table entry")
    p.add_argument("--t-class", type=float, help="Seconds per class label (overrides the table)")
    p.add_argument("--t-seg", type=float, help="Seconds per segmentation (overrides the table)")
    p.add_argument("--output", "-o", help="Output file (default: cost_curve.tsv beside the results)")
    p.add_argument("--verbose", "-v", action="store_true")
    p.set_defaults(func=cmd_cost_report)
    return parser


def overrides_from_args(args: argparse.Namespace, method: Optional[str] = None) -> Dict:
    """Map CLI flags onto config sections; unset flags are dropped later."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "dataset": {
            "name": get("dataset"),
            "manifest": get("manifest"),
            "test_manifest": get("test_manifest"),
            "num_classes": get("num_classes"),
            "image_shape": get("image_shape"),
            "size": get("size"),
            "test_size": get("test_size"),
            "binary_masks": get("binary_masks"),
            "input_size": get("input_size"),
        },
        "subset": {"m": get("m"), "seed": get("seed")},
        "network": {
            "backbone": get("backbone"),
            "depth": get("depth"),
            "width": get("width"),
            "dropout": get("dropout"),
            "pretrained": get("pretrained"),
        },
        "train": {
            "method": method,
            "seed": get("seed"),
            "epochs": get("epochs"),
            "batch_size": get("batch_size"),
            "lr": get("lr"),
            "momentum": get("momentum"),
            "weight_decay": get("weight_decay"),
            "lr_schedule": get("lr_schedule"),
            "mtl_lambda": get("mtl_lambda"),
            "device": get("device"),
        },
        "labels": {
            "mode": get("label_mode"),
            "seg_model": get("seg_model"),
            "threshold": get("threshold"),
            "keep_manual": get("keep_manual"),
            "seg_labeled": get("seg_labeled"),
        },
        "output_dir": get("output"),
    }


def _resolve(args: argparse.Namespace, method: Optional[str] = None) -> RunConfig:
    return RunConfig.resolve(args.config, overrides_from_args(args, method))


def cmd_prepare_labels(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.mode == "propagate" and not args.seg_model:
        parser.error("prepare-labels --mode propagate requires --seg-model")
    cfg = _resolve(args)
    out_dir = args.output or f"{settings.OUTPUT_ROOT}/{cfg.dataset_name}-labels-{args.mode}"
    prepare_labels(cfg, args.mode, out_dir, seg_model_dir=args.seg_model)
    return EXIT_OK


def cmd_train_seg(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.m is None:
        parser.error("train-seg requires --m")
    cfg = _resolve(args, method="cvs")
    train_seg_model(cfg, args.output or f"{settings.OUTPUT_ROOT}/{cfg.dataset_name}-seg-{args.m}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg = _resolve(args, method=args.method)
    train_method(cfg, args.output)
    return EXIT_OK


def cmd_propagate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if not args.seg_model:
        parser.error("propagate requires --seg-model")
    args.mode = "propagate"
    return cmd_prepare_labels(args, parser)


def cmd_evaluate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg = _resolve(args)
    evaluate_checkpoint(cfg, args.checkpoint, args.report)
    return EXIT_OK


def cmd_grid(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg = _resolve(args)
    out_dir = args.output or f"{settings.OUTPUT_ROOT}/{cfg.dataset_name}-grid"
    run_grid(cfg, args.methods, args.m_values, args.seeds, folds=args.folds, out_dir=out_dir)
    return EXIT_OK


def cmd_cost_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    rates = rates_for(args.dataset)
    rates = AnnotationRates(
        args.t_class if args.t_class is not None else rates.t_class,
        args.t_seg if args.t_seg is not None else rates.t_seg,
    )
    cost_report(args.results, rates, args.output)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one subcommand

    Returns:
        0 on success, 1 on runtime failure, 2 on usage or validation errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("DEBUG" if args.verbose else settings.LOG_LEVEL)
    try:
        return args.func(args, parser)
    except (ValueError, FileNotFoundError, DatasetLoadError) as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CvsError, RuntimeError, OSError) as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
