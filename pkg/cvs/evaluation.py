"""
Evaluation
Accuracy and IoU metrics, k-fold plans, experiment grids and result tables
"""

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .augmentation import AugmentationPolicy, default_policy
from .config import settings
from .datasets import ALL, LabeledSample, SampleCollection, SubsetSpec, take_per_class
from .exceptions import ConfigError, CvsError, DatasetValidationError, ShapeError
from .inference import predict_labels, predict_masks
from .networks import ModelGraph, ModelParams, NetworkConfig, estimate_flops
from .training import TrainConfig, estimate_steps, train, validation_split
from .utils.helpers import atomic_write_json, parse_optional_float, read_tsv, write_tsv

RESULT_COLUMNS = (
    "method", "backbone", "dataset", "m", "seed", "fold", "top1", "mean_iou", "n_class_labeled",
    "n_seg_labeled", "compute_cost", "seconds", "status", "per_class", "diagnostic",
)
MEAN_COLUMNS = ("method", "backbone", "dataset", "m", "n_runs", "top1_mean", "top1_std", "mean_iou_mean")


@dataclass
class EvalReport:
    """Outcome of one (method, M, seed) cell; failed cells carry a diagnostic and no accuracy."""
    method: str
    backbone: str
    m: Union[int, str]
    seed: int
    top1: Optional[float] = None
    per_class: Optional[Dict[int, float]] = None
    mean_iou: Optional[float] = None
    seconds: float = 0.0
    n_class_labeled: Optional[int] = None
    n_seg_labeled: Optional[int] = None
    compute_cost: Optional[float] = None
    dataset: str = ""
    fold: Optional[int] = None
    status: str = "ok"
    diagnostic: str = ""

    def __post_init__(self):
        if self.top1 is not None and not 0.0 <= self.top1 <= 1.0:
            raise ValueError(f"top1 must lie in [0, 1], got {self.top1}")
        if self.m != ALL:
            self.m = int(self.m)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def name(self) -> str:
        fold = f"-fold{self.fold}" if self.fold is not None else ""
        return f"{self.method}/{self.backbone}/m={self.m}/seed={self.seed}{fold}"

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.per_class is not None:
            data["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        data = dict(data)
        if data.get("per_class") is not None:
            data["per_class"] = {int(k): float(v) for k, v in data["per_class"].items()}
        return cls(**data)

    def save(self, path: Union[str, Path]):
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    if predictions.size == 0:
        raise DatasetValidationError("Accuracy of an empty prediction set is undefined")
    return float(np.mean(predictions == labels))


def per_class_accuracy(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> Dict[int, float]:
    """Accuracy restricted to each class that occurs in ``labels``."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    result = {}
    for c in range(1, num_classes + 1):
        members = labels == c
        if members.any():
            result[c] = float(np.mean(predictions[members] == c))
    return result


@dataclass(frozen=True)
class IoUResult:
    per_class: Dict[int, float]
    mean: Optional[float]


def mean_iou(pred_masks, gt_masks, num_classes: int, include_background: bool = False) -> IoUResult:
    """
    Intersection over union per class, accumulated over all mask pairs

    Classes absent from both predictions and ground truth are left out of
    the mean.

    Args:
        pred_masks: One H x W mask or a sequence of them
        gt_masks: Reference masks, same shapes
        num_classes: P
        include_background: Also score class 0
    """
    if isinstance(pred_masks, np.ndarray) and pred_masks.ndim == 2:
        pred_masks, gt_masks = [pred_masks], [gt_masks]
    if len(pred_masks) != len(gt_masks):
        raise ShapeError(f"{len(pred_masks)} predicted masks for {len(gt_masks)} references")
    classes = range(0 if include_background else 1, num_classes + 1)
    intersection = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    for pred, gt in zip(pred_masks, gt_masks):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
        for c in classes:
            p, g = pred == c, gt == c
            intersection[c] += int(np.logical_and(p, g).sum())
            union[c] += int(np.logical_or(p, g).sum())
    per_class = {c: intersection[c] / union[c] for c in classes if union[c] > 0}
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return IoUResult(per_class, mean)


# ---------------------------------------------------------------------------
# K-fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """k (train ids, test ids) pairs whose test sets partition the id universe."""
    k: int
    folds: Tuple[Tuple[Tuple[str, ...], Tuple[str, ...]], ...]
    seed: int

    def __post_init__(self):
        universe = set(self.folds[0][0]) | set(self.folds[0][1]) if self.folds else set()
        seen = set()
        for train_ids, test_ids in self.folds:
            if set(train_ids) & set(test_ids):
                raise DatasetValidationError("A fold's train and test ids overlap")
            if set(train_ids) | set(test_ids) != universe:
                raise DatasetValidationError("A fold does not cover the id universe")
            if seen & set(test_ids):
                raise DatasetValidationError("Test folds overlap")
            seen |= set(test_ids)
        if seen != universe:
            raise DatasetValidationError("Test folds do not cover the id universe")


def kfold_split(ids: Sequence[str], k: int, seed: int) -> FoldPlan:
    """
    Seeded shuffle then contiguous chunks; fold sizes differ by at most one

    Raises:
        ConfigError: If k < 2 or k exceeds the number of ids
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DatasetValidationError("Fold ids must be unique")
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ConfigError(f"k={k} exceeds the number of ids ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(order, k):
        test = set(chunk.tolist())
        test_ids = tuple(ids[i] for i in sorted(test))
        train_ids = tuple(ids[i] for i in range(len(ids)) if i not in test)
        folds.append((train_ids, test_ids))
    return FoldPlan(k, tuple(folds), seed)


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def evaluate_model(graph: ModelGraph, params: ModelParams, samples: Sequence[LabeledSample],
                   batch_size: int = 64, device: str = "cpu") -> Dict:
    """
    Score a trained model on labeled samples

    Returns:
        Dict with ``top1``, ``per_class`` and ``mean_iou`` (``None`` unless
        the model has a segmentation head and every sample has a mask)
    """
    samples = list(samples)
    if not samples:
        raise DatasetValidationError("Cannot evaluate on an empty sample set")
    images = [s.image for s in samples]
    labels = [s.label for s in samples]
    predicted = predict_labels(graph, params, images, batch_size=batch_size, device=device)
    result = {
        "top1": accuracy(predicted, labels),
        "per_class": per_class_accuracy(predicted, labels, graph.num_classes),
        "mean_iou": None,
    }
    if "seg" in graph.heads and all(s.mask is not None for s in samples):
        masks = predict_masks(graph, params, images, batch_size=batch_size, device=device)
        result["mean_iou"] = mean_iou(masks, [s.mask for s in samples], graph.num_classes).mean
    return result


def _run_cell(method: str, m, seed: int, train_samples: Sequence[LabeledSample], test: Sequence[LabeledSample],
              dataset_name: str, num_classes: int, image_shape, network_cfg: NetworkConfig,
              train_cfg: TrainConfig, policy: Optional[AugmentationPolicy], seg_labeled: Optional[int],
              cell_dir: Optional[Path], fold: Optional[int] = None, config_hash: str = "") -> EvalReport:
    started = time.time()
    base = EvalReport(method=method, backbone=network_cfg.backbone, m=m, seed=seed, dataset=dataset_name, fold=fold)
    try:
        train_samples = list(train_samples)
        config = replace(train_cfg, method=method, seed=seed).resolved(len(train_samples), m)
        fit, held_out = validation_split(train_samples, m, num_classes, seed)
        graph = network_cfg.build(method, image_shape, num_classes)
        result = train(graph, fit, config, policy=policy, validation=held_out, output_dir=cell_dir,
                       config_hash=config_hash)
        scores = evaluate_model(graph, result.params, test, batch_size=config.eval_batch_size,
                                device=config.device)
        if method in settings.SEGMENTATION_METHODS:
            n_seg = len(train_samples) if seg_labeled is None else seg_labeled
        else:
            n_seg = 0
        report = replace(
            base,
            top1=scores["top1"],
            per_class=scores["per_class"],
            mean_iou=scores["mean_iou"],
            n_class_labeled=len(train_samples),
            n_seg_labeled=n_seg,
            compute_cost=float(estimate_flops(graph) * estimate_steps(len(fit), config) * config.batch_size),
            seconds=time.time() - started,
        )
    except Exception as e:
        logger.exception(f"Cell {base.name} failed: {e}")
        report = replace(base, status="failed", diagnostic=str(e), seconds=time.time() - started)
    if cell_dir is not None:
        report.save(cell_dir / settings.REPORT_FILENAME)
    return report


def run_experiment_grid(dataset: SampleCollection, test: SampleCollection, methods: Sequence[str],
                        m_values: Sequence[Union[int, str]], seeds: Sequence[int], network_cfg: NetworkConfig,
                        train_cfg: TrainConfig, policies: Optional[Dict[str, AugmentationPolicy]] = None,
                        seg_labeled: Optional[int] = None,
                        output_dir: Optional[Union[str, Path]] = None,
                        config_hash: str = "") -> List[EvalReport]:
    """
    Train and evaluate every (method, M, seed) cell

    A failing cell becomes a report with ``status="failed"`` and the grid
    continues. Reports come back method-major, then M, then seed.

    Args:
        dataset: Training pool (with masks for segmentation methods)
        test: Held-out evaluation samples
        methods: Training methods
        m_values: Samples per class, integers or ``"all"``
        seeds: Root seeds, one run each
        network_cfg: Backbone selection
        train_cfg: Base training config; method and seed are set per cell
        policies: Augmentation per method (defaults per dataset otherwise)
        seg_labeled: Manual segmentations behind the masks when they were
            propagated; by default every training mask counts as manual
        output_dir: Writes per-cell runs plus results tables when given
    """
    for method in methods:
        if method not in settings.METHODS:
            raise ConfigError(f"Unknown method {method!r}")
    policies = policies or {}
    output_dir = Path(output_dir) if output_dir is not None else None
    reports = []
    for method in methods:
        policy = policies.get(method) or default_policy(dataset.spec.name, method, fundus=dataset.spec.binary_masks)
        for m in m_values:
            for seed in seeds:
                cell_dir = output_dir / "cells" / f"{method}-m{m}-s{seed}" if output_dir is not None else None
                try:
                    subset = list(take_per_class(dataset, SubsetSpec(m, seed)))
                except CvsError as e:
                    logger.warning(f"Cell {method}/m={m}/seed={seed} failed: {e}")
                    reports.append(EvalReport(method, network_cfg.backbone, m, seed, dataset=dataset.spec.name,
                                              status="failed", diagnostic=str(e)))
                    continue
                reports.append(_run_cell(
                    method, m, seed, subset, list(test), dataset.spec.name, dataset.num_classes,
                    dataset.spec.image_shape, network_cfg, train_cfg, policy, seg_labeled, cell_dir,
                    config_hash=config_hash,
                ))
                logger.info(f"{reports[-1].name}: top1={reports[-1].top1} ({reports[-1].status})")
    if output_dir is not None:
        write_results_table(output_dir / settings.RESULTS_FILENAME, reports)
        write_mean_table(output_dir / settings.RESULTS_MEAN_FILENAME, aggregate_reports(reports))
    return reports


def run_kfold(samples: SampleCollection, k: int, seed: int, method: str, network_cfg: NetworkConfig,
              train_cfg: TrainConfig, policy: Optional[AugmentationPolicy] = None,
              output_dir: Optional[Union[str, Path]] = None,
              config_hash: str = "") -> Tuple[List[EvalReport], Optional[float]]:
    """
    Cross-validate one method: train on k-1 folds, test on the held-out fold

    Returns:
        One report per fold and the mean accuracy over successful folds
    """
    plan = kfold_split(samples.ids, k, seed)
    policy = policy or default_policy(samples.spec.name, method, fundus=samples.spec.binary_masks)
    output_dir = Path(output_dir) if output_dir is not None else None
    reports = []
    for index, (train_ids, test_ids) in enumerate(plan.folds, start=1):
        cell_dir = output_dir / "folds" / f"{method}-fold{index}" if output_dir is not None else None
        reports.append(_run_cell(
            method, ALL, seed, [samples[i] for i in train_ids], [samples[i] for i in test_ids],
            samples.spec.name, samples.num_classes, samples.spec.image_shape, network_cfg, train_cfg,
            policy, None, cell_dir, fold=index, config_hash=config_hash,
        ))
        logger.info(f"Fold {index}/{k}: top1={reports[-1].top1}")
    scores = [r.top1 for r in reports if r.ok]
    mean = float(np.mean(scores)) if scores else None
    if output_dir is not None:
        write_results_table(output_dir / settings.RESULTS_FILENAME, reports)
        write_mean_table(output_dir / settings.RESULTS_MEAN_FILENAME, aggregate_reports(reports))
    return reports, mean


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _format_per_class(per_class: Optional[Dict[int, float]]) -> Optional[str]:
    if per_class is None:
        return None
    return json.dumps({str(k): v for k, v in sorted(per_class.items())}, separators=(",", ":"))


def write_results_table(path: Union[str, Path], reports: Sequence[EvalReport]):
    """One row per report, in report order."""
    rows = [
        (r.method, r.backbone, r.dataset, r.m, r.seed, r.fold, r.top1, r.mean_iou, r.n_class_labeled,
         r.n_seg_labeled, r.compute_cost, r.seconds, r.status, _format_per_class(r.per_class), r.diagnostic or None)
        for r in reports
    ]
    write_tsv(path, RESULT_COLUMNS, rows)


def _optional_int(text: str) -> Optional[int]:
    return None if text in ("-", "") else int(text)


def read_results_table(path: Union[str, Path]) -> List[EvalReport]:
    reports = []
    for row in read_tsv(path):
        per_class = None
        if row["per_class"] != "-":
            per_class = {int(k): float(v) for k, v in json.loads(row["per_class"]).items()}
        reports.append(EvalReport(
            method=row["method"],
            backbone=row["backbone"],
            dataset=row["dataset"],
            m=row["m"] if row["m"] == ALL else int(row["m"]),
            seed=int(row["seed"]),
            fold=_optional_int(row["fold"]),
            top1=parse_optional_float(row["top1"]),
            mean_iou=parse_optional_float(row["mean_iou"]),
            n_class_labeled=_optional_int(row["n_class_labeled"]),
            n_seg_labeled=_optional_int(row["n_seg_labeled"]),
            compute_cost=parse_optional_float(row["compute_cost"]),
            seconds=float(row["seconds"]),
            status=row["status"],
            per_class=per_class,
            diagnostic="" if row["diagnostic"] == "-" else row["diagnostic"],
        ))
    return reports


@dataclass(frozen=True)
class MeanRow:
    method: str
    backbone: str
    dataset: str
    m: Union[int, str]
    n_runs: int
    top1_mean: Optional[float]
    top1_std: Optional[float]
    mean_iou_mean: Optional[float] = None


def aggregate_reports(reports: Sequence[EvalReport]) -> List[MeanRow]:
    """Mean and standard deviation of top-1 over seeds (and folds), failed cells excluded."""
    groups: Dict[Tuple, List[EvalReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.backbone, r.dataset, r.m), []).append(r)
    rows = []
    for (method, backbone, dataset, m), members in groups.items():
        ok = [r for r in members if r.ok and r.top1 is not None]
        top1 = [r.top1 for r in ok]
        ious = [r.mean_iou for r in ok if r.mean_iou is not None]
        rows.append(MeanRow(
            method, backbone, dataset, m, len(ok),
            float(np.mean(top1)) if top1 else None,
            float(np.std(top1)) if top1 else None,
            float(np.mean(ious)) if ious else None,
        ))
    return rows


def write_mean_table(path: Union[str, Path], rows: Sequence[MeanRow]):
    write_tsv(path, MEAN_COLUMNS, [
        (r.method, r.backbone, r.dataset, r.m, r.n_runs, r.top1_mean, r.top1_std, r.mean_iou_mean) for r in rows
    ])
