"""
Training
Losses, SGD configuration, checkpoints and the epoch loop for CvS and
the baselines
"""

import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch.utils.data import DataLoader, Dataset

from .augmentation import AugmentationPolicy, augment
from .config import settings
from .datasets import ALL, LabeledSample
from .exceptions import (
    ConfigError,
    DatasetValidationError,
    MissingLabelsError,
    ShapeError,
    TrainingDivergedError,
)
from .inference import predict_labels
from .networks import ModelGraph, ModelParams, materialize
from .networks.modules import load_params
from .utils.helpers import (
    atomic_replace_dir,
    atomic_write_json,
    derive_seed,
    read_tsv,
    seed_everything,
    write_tsv,
)

MASK_METHODS = {"cvs", "segmentation-only", "multitask"}
CHECKPOINT_DIRNAME = "checkpoint"
METRIC_HEADER = ("epoch", "split", "metric", "value")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """
    Optimizer and loop settings for one training run

    ``epochs`` and ``batch_size`` may be left as ``None`` and filled in by
    ``resolved`` from the training-set size.
    """
    method: str = "cvs"
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: float = settings.DEFAULT_LR
    momentum: float = settings.DEFAULT_MOMENTUM
    weight_decay: float = settings.DEFAULT_WEIGHT_DECAY
    lr_schedule: str = settings.DEFAULT_LR_SCHEDULE
    mtl_lambda: float = settings.DEFAULT_MTL_LAMBDA
    seed: int = settings.DEFAULT_SEED
    device: str = settings.DEFAULT_DEVICE
    checkpoint_every: int = 1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.method not in settings.METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; expected one of {settings.METHODS}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size is not None and self.batch_size not in settings.ALLOWED_BATCH_SIZES:
            raise ConfigError(f"batch_size must be one of {settings.ALLOWED_BATCH_SIZES}, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.mtl_lambda < 0:
            raise ConfigError(f"mtl_lambda must be >= 0, got {self.mtl_lambda}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def resolved(self, n_train: int, m: Union[int, str] = ALL) -> "TrainConfig":
        return replace(
            self,
            epochs=resolve_epochs(m, self.epochs),
            batch_size=resolve_batch_size(n_train, self.batch_size),
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {unknown}")
        return cls(**data)


def resolve_epochs(m: Union[int, str], epochs: Optional[int] = None) -> int:
    """Explicit epochs win; otherwise 600 for M <= 100 and 200 for more data."""
    if epochs is not None:
        return epochs
    if m != ALL and int(m) <= settings.SMALL_DATA_M:
        return settings.EPOCHS_SMALL_DATA
    return settings.EPOCHS_FULL_DATA


def resolve_batch_size(n_train: int, batch_size: Optional[int] = None) -> int:
    """Explicit batch size wins; otherwise the smallest ladder step that fits n_train."""
    if batch_size is not None:
        return batch_size
    for limit, size in settings.BATCH_SIZE_LADDER:
        if n_train <= limit:
            return size
    return settings.LARGE_BATCH_SIZE


def validation_split(samples: Sequence[LabeledSample], m: Union[int, str], num_classes: int,
                     seed: int) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    """
    Hold out 10% of the training subset for per-epoch validation

    Only applies when the subset holds at least 50 images (M * P, or the
    whole pool when M is ``all``); smaller subsets train on everything and
    return an empty validation list.
    """
    samples = list(samples)
    subset_size = len(samples) if m == ALL else int(m) * num_classes
    if subset_size < settings.VALIDATION_MIN_SUBSET:
        return samples, []
    n_val = max(1, int(round(settings.VALIDATION_FRACTION * len(samples))))
    order = np.random.default_rng(derive_seed(seed, 17)).permutation(len(samples))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def pixel_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Mean per-pixel cross entropy over P+1 channels, background included

    Args:
        logits: (P+1) x H x W or N x (P+1) x H x W
        target: H x W or N x H x W integer mask with values in 0..P

    Returns:
        Scalar loss
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target).long()
    if logits.ndim == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.ndim != 4 or tuple(target.shape) != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"Logits {tuple(logits.shape)} and mask {tuple(target.shape)} do not agree")
    num_channels = logits.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_channels):
        raise DatasetValidationError(f"Mask values must lie in 0..{num_channels - 1}")
    return F.cross_entropy(logits, target)


def class_cross_entropy(scores: torch.Tensor, label) -> torch.Tensor:
    """
    Cross entropy of P class scores against a 1-based label

    Args:
        scores: Length-P vector or N x P matrix
        label: 1-based class, or a length-N tensor of them
    """
    scores = torch.as_tensor(scores)
    label = torch.as_tensor(label).long()
    if scores.ndim == 1:
        scores, label = scores.unsqueeze(0), label.reshape(1)
    num_classes = scores.shape[1]
    if int(label.min()) < 1 or int(label.max()) > num_classes:
        raise DatasetValidationError(f"Class labels must lie in 1..{num_classes}")
    return F.cross_entropy(scores, label - 1)


def multitask_loss(seg_loss, clf_loss, mtl_lambda: float):
    """Segmentation loss plus ``mtl_lambda`` times the classification loss."""
    if mtl_lambda < 0:
        raise ConfigError(f"mtl_lambda must be >= 0, got {mtl_lambda}")
    return seg_loss + mtl_lambda * clf_loss


def method_loss(method: str, outputs: Dict[str, torch.Tensor], labels: torch.Tensor, masks: torch.Tensor,
                mtl_lambda: float) -> torch.Tensor:
    if method in ("cvs", "segmentation-only"):
        return pixel_cross_entropy(outputs["seg"], masks)
    if method == "classification":
        return class_cross_entropy(outputs["clf"], labels)
    return multitask_loss(
        pixel_cross_entropy(outputs["seg"], masks),
        class_cross_entropy(outputs["clf"], labels),
        mtl_lambda,
    )


def check_labels(samples: Sequence[LabeledSample], method: str, num_classes: int):
    """
    Fail before training when the method's label kind is missing

    Raises:
        MissingLabelsError: Listing samples without masks for mask methods
        DatasetValidationError: On class labels outside 1..P
    """
    bad_labels = [s.id for s in samples if not 1 <= s.label <= num_classes]
    if bad_labels:
        raise DatasetValidationError(f"Class labels outside 1..{num_classes}: {bad_labels[:10]}")
    if method in MASK_METHODS:
        missing = [s.id for s in samples if s.mask is None]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise MissingLabelsError(
                f"Method {method} needs masks; {len(missing)} samples have none: {shown}", missing
            )


# ---------------------------------------------------------------------------
# Data feeding
# ---------------------------------------------------------------------------

class SampleDataset(Dataset):
    """
    Torch view over labeled samples

    Each item is augmented with a seed derived from (seed, epoch, index), so
    an epoch's data does not depend on loader order or worker count.
    """

    def __init__(self, samples: Sequence[LabeledSample], policy: Optional[AugmentationPolicy] = None,
                 seed: int = 0, with_masks: bool = True):
        self.samples = list(samples)
        self.policy = policy or AugmentationPolicy(())
        self.seed = seed
        self.with_masks = with_masks
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        if len(self.policy):
            sample = augment(sample, self.policy, derive_seed(self.seed, self.epoch, index))
        image = torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float32)).permute(2, 0, 1)
        label = torch.tensor(sample.label, dtype=torch.long)
        if self.with_masks:
            mask = torch.from_numpy(np.asarray(sample.mask, dtype=np.int64))
        else:
            mask = torch.zeros(0, dtype=torch.long)
        return image, label, mask


# ---------------------------------------------------------------------------
# Metric log and checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    split: str
    metric: str
    value: float


def write_metric_log(path: Union[str, Path], records: Sequence[MetricRecord]):
    write_tsv(path, METRIC_HEADER, [(r.epoch, r.split, r.metric, r.value) for r in records])


def read_metric_log(path: Union[str, Path]) -> List[MetricRecord]:
    return [
        MetricRecord(int(row["epoch"]), row["split"], row["metric"], float(row["value"]))
        for row in read_tsv(path)
    ]


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""
    graph: ModelGraph
    params: ModelParams
    optimizer_state: Dict = field(default_factory=dict)
    scheduler_state: Dict = field(default_factory=dict)
    epoch: int = 0
    best_metric: Optional[float] = None
    config_hash: str = ""
    metrics: List[MetricRecord] = field(default_factory=list)

    def save(self, directory: Union[str, Path]) -> Path:
        """Write the checkpoint into a temporary sibling and rename it over ``directory``."""
        directory = Path(directory)
        directory.parent.mkdir(parents=True, exist_ok=True)
        tmp_dir = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
        self.graph.save(tmp_dir / "graph.json")
        self.params.save(tmp_dir / "params.pt")
        torch.save({"optimizer": self.optimizer_state, "scheduler": self.scheduler_state}, tmp_dir / "optimizer.pt")
        write_metric_log(tmp_dir / settings.METRICS_FILENAME, self.metrics)
        atomic_write_json(tmp_dir / "meta.json", {
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "config_hash": self.config_hash,
            "format_version": settings.FORMAT_VERSION,
            "method": self.graph.method,
        })
        atomic_replace_dir(tmp_dir, directory)
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "Checkpoint":
        directory = Path(directory)
        if not (directory / "meta.json").is_file():
            raise FileNotFoundError(f"No checkpoint at {directory}")
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        if meta.get("format_version") != settings.FORMAT_VERSION:
            raise ConfigError(f"Checkpoint {directory} has format {meta.get('format_version')!r}")
        graph = ModelGraph.load(directory / "graph.json")
        params = ModelParams.load(directory / "params.pt")
        state = torch.load(directory / "optimizer.pt", map_location="cpu")
        metrics_path = directory / settings.METRICS_FILENAME
        return cls(
            graph=graph,
            params=params,
            optimizer_state=state.get("optimizer", {}),
            scheduler_state=state.get("scheduler", {}),
            epoch=int(meta["epoch"]),
            best_metric=meta.get("best_metric"),
            config_hash=meta.get("config_hash", ""),
            metrics=read_metric_log(metrics_path) if metrics_path.exists() else [],
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[MetricRecord]
    checkpoint_path: Optional[Path] = None
    seconds: float = 0.0

    @property
    def graph(self) -> ModelGraph:
        return self.checkpoint.graph

    @property
    def params(self) -> ModelParams:
        return self.checkpoint.params

    def values(self, split: str, metric: str) -> List[float]:
        return [r.value for r in self.metrics if r.split == split and r.metric == metric]


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def make_optimizer(parameters, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum and L2 weight decay from the run config."""
    return torch.optim.SGD(parameters, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def _make_scheduler(optimizer, config: TrainConfig):
    if config.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    return torch.optim.lr_scheduler.ConstantLR(optimizer, factor=1.0, total_iters=0)


def _required_heads(method: str) -> set:
    return {"cvs": {"seg"}, "segmentation-only": {"seg"}, "classification": {"clf"},
            "multitask": {"seg", "clf"}}[method]


def train(graph: ModelGraph, samples: Sequence[LabeledSample], config: TrainConfig,
          policy: Optional[AugmentationPolicy] = None, validation: Sequence[LabeledSample] = (),
          output_dir: Optional[Union[str, Path]] = None, resume_from: Optional[Union[str, Path]] = None,
          init_params: Optional[ModelParams] = None, config_hash: str = "") -> TrainResult:
    """
    Train a model with SGD and momentum

    Args:
        graph: Model graph whose heads match ``config.method``
        samples: Training samples
        config: Resolved training config (epochs and batch size set)
        policy: Augmentation applied per sample and epoch
        validation: Held-out samples scored for accuracy after every epoch
        output_dir: Where ``checkpoint/`` and ``metrics.tsv`` go; nothing is written when omitted
        resume_from: Checkpoint directory to continue from
        init_params: Starting weights instead of a fresh initialization
        config_hash: Hash of the resolved run config, stamped on checkpoints

    Returns:
        TrainResult with the final checkpoint and per-epoch metrics

    Raises:
        MissingLabelsError: Before the first step if required labels are absent
        TrainingDivergedError: When a loss becomes non-finite
    """
    samples = list(samples)
    if not samples:
        raise DatasetValidationError("Cannot train on an empty sample set")
    if config.epochs is None or config.batch_size is None:
        config = config.resolved(len(samples))
    missing_heads = _required_heads(config.method) - set(graph.heads)
    if missing_heads:
        raise ConfigError(f"Method {config.method} needs heads {sorted(missing_heads)}")
    check_labels(samples, config.method, graph.num_classes)

    device = torch.device(config.device)
    seed_everything(config.seed)
    net = materialize(graph, seed=config.seed)
    if init_params is not None:
        load_params(net, init_params)
    net.to(device)

    optimizer = make_optimizer(net.parameters(), config)
    scheduler = _make_scheduler(optimizer, config)

    start_epoch, best_metric, metrics = 1, None, []
    if resume_from is not None:
        previous = Checkpoint.load(resume_from)
        load_params(net, previous.params)
        net.to(device)
        optimizer.load_state_dict(previous.optimizer_state)
        scheduler.load_state_dict(previous.scheduler_state)
        start_epoch, best_metric = previous.epoch + 1, previous.best_metric
        metrics = [r for r in previous.metrics if r.epoch <= previous.epoch]
        logger.info(f"Resuming from {resume_from} at epoch {start_epoch}")

    with_masks = config.method in MASK_METHODS
    dataset = SampleDataset(samples, policy, seed=config.seed, with_masks=with_masks)
    generator = torch.Generator()
    # batch norm cannot normalize a single-sample batch
    drop_last = len(samples) > 1 and len(samples) % config.batch_size == 1
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator,
                        drop_last=drop_last)

    output_dir = Path(output_dir) if output_dir is not None else None
    checkpoint_path = output_dir / CHECKPOINT_DIRNAME if output_dir is not None else None
    logger.info(
        f"Training {config.method} on {len(samples)} samples: {config.epochs} epochs, "
        f"batch {config.batch_size}, lr {config.lr}, schedule {config.lr_schedule}"
    )
    started = time.time()
    checkpoint = None
    for epoch in range(start_epoch, config.epochs + 1):
        dataset.set_epoch(epoch)
        generator.manual_seed(derive_seed(config.seed, epoch))
        torch.manual_seed(derive_seed(config.seed, epoch, 1))
        net.train()
        total, count = 0.0, 0
        for step, (images, labels, masks) in enumerate(loader):
            images, labels, masks = images.to(device), labels.to(device), masks.to(device)
            outputs = net(images)
            loss = method_loss(config.method, outputs, labels, masks, config.mtl_lambda)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite loss {loss.item()} at epoch {epoch}, step {step} "
                    f"(lr {optimizer.param_groups[0]['lr']:.4g}); lower lr or check inputs"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * images.shape[0]
            count += images.shape[0]
        scheduler.step()

        train_loss = total / max(count, 1)
        metrics.append(MetricRecord(epoch, "train", "loss", train_loss))
        message = f"epoch {epoch}/{config.epochs} loss {train_loss:.4f}"
        if validation:
            val_params = ModelParams.from_module(net)
            predicted = predict_labels(graph, val_params, [s.image for s in validation],
                                       batch_size=config.eval_batch_size, device=config.device)
            val_acc = float(np.mean(predicted == np.asarray([s.label for s in validation])))
            metrics.append(MetricRecord(epoch, "val", "accuracy", val_acc))
            best_metric = val_acc if best_metric is None else max(best_metric, val_acc)
            message += f" val_acc {val_acc:.4f}"
        if epoch in (1, config.epochs):
            logger.info(message)
        else:
            logger.debug(message)

        last = epoch == config.epochs
        if last or (checkpoint_path is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0):
            checkpoint = Checkpoint(
                graph=graph,
                params=ModelParams.from_module(net, epoch=epoch, config_hash=config_hash),
                optimizer_state=optimizer.state_dict(),
                scheduler_state=scheduler.state_dict(),
                epoch=epoch,
                best_metric=best_metric,
                config_hash=config_hash,
                metrics=list(metrics),
            )
            if checkpoint_path is not None:
                checkpoint.save(checkpoint_path)
                write_metric_log(output_dir / settings.METRICS_FILENAME, metrics)

    if checkpoint is None:
        # resumed from a checkpoint that had already finished
        checkpoint = Checkpoint.load(resume_from)
    seconds = time.time() - started
    logger.info(f"Finished {config.method} in {seconds:.1f}s")
    return TrainResult(checkpoint=checkpoint, metrics=list(metrics), checkpoint_path=checkpoint_path, seconds=seconds)


def estimate_steps(n_train: int, config: TrainConfig) -> int:
    """Optimizer steps a resolved config performs over ``n_train`` samples."""
    if n_train > 1 and n_train % config.batch_size == 1:
        per_epoch = n_train // config.batch_size
    else:
        per_epoch = math.ceil(n_train / config.batch_size)
    return per_epoch * config.epochs
