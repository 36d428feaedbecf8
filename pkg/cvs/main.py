"""
Main Pipeline Functions
Label preparation, Seg-M training, propagation, method training,
evaluation, grids and cost reports
"""

import json
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .config import settings
from .config.run_config import RunConfig
from .cost_analysis import AnnotationRates, emit_cost_curve, write_cost_rows
from .datasets import SampleCollection, load_dataset, take_per_class
from .evaluation import (
    EvalReport,
    aggregate_reports,
    evaluate_model,
    read_results_table,
    run_experiment_grid,
    run_kfold,
    write_mean_table,
    write_results_table,
)
from .exceptions import ConfigError
from .label_synthesis import (
    PropagationReport,
    SegModel,
    binarize_dataset,
    binarize_to_mask,
    build_seg_m,
    merge_manual_masks,
    propagate_labels,
    relabel_foreground,
    write_propagated,
)
from .networks import estimate_flops
from .training import CHECKPOINT_DIRNAME, Checkpoint, TrainResult, estimate_steps, train, validation_split
from .utils.helpers import OutputLock, atomic_write_json, seed_everything

TRAIN_SUMMARY_FILENAME = "train_summary.json"


def _banner(title: str, cfg: RunConfig, out_dir: Path):
    print("=" * 60)
    print(title)
    print("=" * 60)
    print(f"Dataset: {cfg.dataset_name}")
    print(f"Backbone: {cfg.document['network']['backbone']}")
    print(f"Output: {out_dir}")
    print(f"Config hash: {cfg.hash[:12]}")
    print("=" * 60)


def propagate_dataset(dataset: SampleCollection, seg_model: SegModel,
                      keep_manual: bool = settings.KEEP_MANUAL_MASKS, batch_size: int = 64,
                      device: str = "cpu") -> Tuple[SampleCollection, PropagationReport]:
    """
    Attach Seg-M masks to every sample of a dataset

    When the model was trained on another label set (e.g. a 10-class model
    on 100-class data) the predicted foreground takes each image's own class.
    The report counts only masks that ended up in the dataset.
    """
    samples = list(dataset)
    masks, report = propagate_labels(seg_model, [s.image for s in samples], batch_size=batch_size, device=device)
    if seg_model.num_classes != dataset.num_classes:
        logger.info(
            f"{seg_model.model_id} has {seg_model.num_classes} classes, dataset has {dataset.num_classes}; "
            "relabeling foreground with image classes"
        )
        masks = relabel_foreground(masks, [s.label for s in samples])
    merged = merge_manual_masks(samples, {s.id: m for s, m in zip(samples, masks)}, keep_manual=keep_manual)
    replaced = sum(1 for s in samples if s.mask is None or not keep_manual)
    if replaced != report.num_propagated:
        logger.info(f"Kept {report.num_propagated - replaced} manual masks")
    return dataset.with_samples(merged), replace(report, num_propagated=replaced)


def _binarize(dataset: SampleCollection, threshold: float) -> SampleCollection:
    if dataset.spec.image_shape[2] == 1:
        return binarize_dataset(dataset, threshold)
    samples = []
    for s in dataset:
        image = s.image
        # grayscale replicated to three channels for the 101-layer backbone
        if np.ptp(image, axis=2).max() == 0:
            image = image[..., :1]
        samples.append(replace(s, mask=binarize_to_mask(image, s.label, threshold)))
    return dataset.with_samples(samples)


def load_labeled(cfg: RunConfig, split: str = "train") -> SampleCollection:
    """
    Load a split and attach masks according to ``labels.mode``

    ``binarize`` thresholds single-channel images, ``propagate`` runs the
    configured Seg-M model, ``manual`` keeps the masks from the source.
    """
    dataset = load_dataset(cfg.dataset_spec(split))
    labels = cfg.document["labels"]
    if labels["mode"] == "binarize":
        dataset = _binarize(dataset, labels["threshold"])
    elif labels["mode"] == "propagate":
        train_cfg = cfg.train_config()
        seg_model = SegModel.load(labels["seg_model"])
        dataset, _ = propagate_dataset(dataset, seg_model, labels["keep_manual"],
                                       batch_size=train_cfg.eval_batch_size, device=train_cfg.device)
    return dataset


def prepare_labels(cfg: RunConfig, mode: str, out_dir: Union[str, Path],
                   seg_model_dir: Optional[Union[str, Path]] = None) -> Dict:
    """
    Write masks and a manifest for the training split

    Args:
        cfg: Resolved run config
        mode: ``binarize`` or ``propagate``
        out_dir: Directory for masks, manifest and report
        seg_model_dir: Seg-M run directory (propagate only)

    Returns:
        Summary with the manifest path and mask counts
    """
    if mode not in ("binarize", "propagate"):
        raise ConfigError(f"mode must be binarize or propagate, got {mode!r}")
    if mode == "propagate" and not seg_model_dir:
        raise ConfigError("propagate mode needs a Seg-M model")
    out_dir = Path(out_dir)
    _banner(f"PREPARE LABELS ({mode})", cfg, out_dir)
    with OutputLock(out_dir, settings.LOCK_FILENAME):
        report = None
        if mode == "binarize":
            dataset = load_labeled(cfg.with_overrides({"labels": {"mode": "binarize"}}))
        else:
            train_cfg = cfg.train_config()
            dataset, report = propagate_dataset(
                load_dataset(cfg.dataset_spec("train")), SegModel.load(seg_model_dir),
                cfg.document["labels"]["keep_manual"], batch_size=train_cfg.eval_batch_size,
                device=train_cfg.device,
            )
        manifest = write_propagated(list(dataset), report, out_dir)
        cfg.write(out_dir)
    with_masks = sum(1 for s in dataset if s.mask is not None)
    print(f"[1/1] Wrote {len(dataset)} records ({with_masks} with masks) to {manifest}")
    if report is not None:
        print(f"      Propagated {report.num_propagated} masks with {report.source_model_id}")
    return {"manifest": manifest, "num_records": len(dataset), "num_masks": with_masks, "report": report}


def train_seg_model(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> SegModel:
    """Train Seg-M on the configured subset and save it under ``out_dir``."""
    out_dir = Path(out_dir or cfg.output_dir)
    _banner("TRAIN SEG-M", cfg, out_dir)
    with OutputLock(out_dir, settings.LOCK_FILENAME):
        cfg.write(out_dir)
        dataset = load_labeled(cfg)
        seed_everything(cfg.seed)
        model = build_seg_m(
            dataset, cfg.subset_spec(), cfg.network_config(), cfg.train_config(),
            policy=cfg.augmentation_policy("cvs"), output_dir=out_dir, config_hash=cfg.hash,
        )
    print(f"[1/1] Trained {model.model_id} -> {out_dir}")
    return model


def train_method(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train one method on M samples per class

    Writes the checkpoint, ``metrics.tsv``, ``config.json`` and a training
    summary with labeling counts into ``out_dir``.
    """
    out_dir = Path(out_dir or cfg.output_dir)
    method = cfg.method
    _banner(f"TRAIN {method.upper()}", cfg, out_dir)
    with OutputLock(out_dir, settings.LOCK_FILENAME):
        cfg.write(out_dir)
        print("[1/3] Loading data...")
        dataset = load_labeled(cfg)
        subset_spec = cfg.subset_spec()
        subset = list(take_per_class(dataset, subset_spec))
        train_cfg = cfg.train_config().resolved(len(subset), subset_spec.m)
        fit, held_out = validation_split(subset, subset_spec.m, dataset.num_classes, train_cfg.seed)
        graph = cfg.network_config().build(method, dataset.spec.image_shape, dataset.num_classes)

        print(f"[2/3] Training on {len(fit)} samples ({len(held_out)} held out)...")
        result = train(graph, fit, train_cfg, policy=cfg.augmentation_policy(method), validation=held_out,
                       output_dir=out_dir, config_hash=cfg.hash)

        print("[3/3] Writing summary...")
        seg_labeled = cfg.document["labels"]["seg_labeled"]
        if method not in settings.SEGMENTATION_METHODS:
            seg_labeled = 0
        elif seg_labeled is None:
            seg_labeled = len(subset)
        atomic_write_json(out_dir / TRAIN_SUMMARY_FILENAME, {
            "method": method,
            "m": subset_spec.m,
            "seed": train_cfg.seed,
            "n_class_labeled": len(subset),
            "n_seg_labeled": seg_labeled,
            "compute_cost": float(estimate_flops(graph) * estimate_steps(len(fit), train_cfg) * train_cfg.batch_size),
            "seconds": result.seconds,
            "config_hash": cfg.hash,
        })
    losses = result.values("train", "loss")
    print(f"Done: {train_cfg.epochs} epochs, final loss {losses[-1]:.4f}" if losses else "Done")
    return result


def evaluate_checkpoint(cfg: RunConfig, checkpoint_dir: Union[str, Path],
                        out_path: Optional[Union[str, Path]] = None) -> EvalReport:
    """
    Evaluate a trained run on the test split

    Args:
        cfg: Run config (dataset and label mode of the test split)
        checkpoint_dir: Training run directory or its ``checkpoint`` subdirectory
        out_path: Report file; defaults to ``eval_report.json`` in the run directory
    """
    path = Path(checkpoint_dir)
    if (path / CHECKPOINT_DIRNAME).is_dir():
        run_dir, ckpt_dir = path, path / CHECKPOINT_DIRNAME
    else:
        run_dir, ckpt_dir = path.parent, path
    checkpoint = Checkpoint.load(ckpt_dir)
    test = load_labeled(cfg, "test")
    train_cfg = cfg.train_config()
    scores = evaluate_model(checkpoint.graph, checkpoint.params, list(test),
                            batch_size=train_cfg.eval_batch_size, device=train_cfg.device)

    summary_path = run_dir / TRAIN_SUMMARY_FILENAME
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    report = EvalReport(
        method=checkpoint.graph.method,
        backbone=checkpoint.graph.backbone.meta.get("backbone", "wide-resnet"),
        m=summary.get("m", cfg.document["subset"]["m"]),
        seed=summary.get("seed", cfg.seed),
        top1=scores["top1"],
        per_class=scores["per_class"],
        mean_iou=scores["mean_iou"],
        seconds=summary.get("seconds", 0.0),
        n_class_labeled=summary.get("n_class_labeled"),
        n_seg_labeled=summary.get("n_seg_labeled"),
        compute_cost=summary.get("compute_cost"),
        dataset=cfg.dataset_name,
    )
    out_path = Path(out_path) if out_path else run_dir / settings.REPORT_FILENAME
    report.save(out_path)
    print(f"Top-1 accuracy: {report.top1:.4f}" + (f"  mean IoU: {report.mean_iou:.4f}" if report.mean_iou is not None else ""))
    print(f"Report: {out_path}")
    return report


def run_grid(cfg: RunConfig, methods: Sequence[str], m_values: Sequence, seeds: Sequence[int],
             folds: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[EvalReport]:
    """
    Run an experiment grid, or k-fold cross-validation when ``folds`` is set

    Results land in ``results.tsv`` and ``results_mean.tsv`` under ``out_dir``.
    """
    out_dir = Path(out_dir or cfg.output_dir)
    _banner("EXPERIMENT GRID" if folds is None else f"{folds}-FOLD CROSS-VALIDATION", cfg, out_dir)
    network_cfg, train_cfg = cfg.network_config(), cfg.train_config()
    with OutputLock(out_dir, settings.LOCK_FILENAME):
        cfg.write(out_dir)
        dataset = load_labeled(cfg)
        if folds is not None:
            reports = []
            for method in methods:
                for seed in seeds:
                    fold_reports, mean = run_kfold(
                        dataset, folds, seed, method, network_cfg, replace(train_cfg, seed=seed),
                        policy=cfg.augmentation_policy(method), config_hash=cfg.hash,
                        output_dir=out_dir / f"{method}-s{seed}",
                    )
                    reports.extend(fold_reports)
                    print(f"{method} seed {seed}: mean accuracy {mean}")
            write_results_table(out_dir / settings.RESULTS_FILENAME, reports)
            write_mean_table(out_dir / settings.RESULTS_MEAN_FILENAME, aggregate_reports(reports))
        else:
            test = load_labeled(cfg, "test")
            policies = {m: cfg.augmentation_policy(m) for m in methods}
            reports = run_experiment_grid(
                dataset, test, methods, m_values, seeds, network_cfg, train_cfg, policies=policies,
                seg_labeled=cfg.document["labels"]["seg_labeled"], output_dir=out_dir, config_hash=cfg.hash,
            )
    failed = sum(1 for r in reports if not r.ok)
    print(f"{len(reports)} runs, {failed} failed -> {out_dir / settings.RESULTS_FILENAME}")
    return reports


def cost_report(results_path: Union[str, Path], rates: AnnotationRates,
                out_path: Optional[Union[str, Path]] = None) -> Path:
    """Turn a results table into cost-vs-accuracy plot rows."""
    results_path = Path(results_path)
    if not results_path.is_file():
        raise FileNotFoundError(f"Results table not found: {results_path}")
    reports = [r for r in read_results_table(results_path) if r.ok]
    points = emit_cost_curve(reports, rates)
    out_path = Path(out_path) if out_path else results_path.with_name(settings.COST_FILENAME)
    write_cost_rows(out_path, points)
    print(f"Wrote {len(points)} cost points to {out_path}")
    return out_path
