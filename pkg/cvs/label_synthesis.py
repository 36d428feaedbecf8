"""
Segmentation label synthesis
Binarization for near-binary images and Seg-M label propagation
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image

from .augmentation import AugmentationPolicy
from .config import settings
from .datasets import (
    LabeledSample,
    ManifestRecord,
    SampleCollection,
    SubsetSpec,
    save_image,
    save_mask,
    take_per_class,
    write_manifest,
)
from .exceptions import ConfigError, DatasetValidationError, MissingLabelsError, ShapeError
from .inference import predict_masks
from .networks import ModelGraph, ModelParams, NetworkConfig
from .training import CHECKPOINT_DIRNAME, Checkpoint, TrainConfig, train
from .utils.helpers import atomic_write_json, atomic_write_text

SEG_MODEL_FILENAME = "seg_model.json"


def validate_mask(mask: np.ndarray, num_classes: int, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Check a mask is an H x W integer grid with values in 0..P

    Returns:
        The mask as int64
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DatasetValidationError(f"Mask must be H x W, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise DatasetValidationError(f"Mask shape {mask.shape} does not match {tuple(shape)}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise DatasetValidationError(f"Mask must hold integers, got {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() > num_classes):
        raise DatasetValidationError(f"Mask values must lie in 0..{num_classes}")
    return mask.astype(np.int64)


def binarize_to_mask(image: np.ndarray, label: int, threshold: float = settings.BINARIZE_THRESHOLD) -> np.ndarray:
    """
    Mask from a single-channel image: pixels above ``threshold`` take ``label``

    Args:
        image: H x W x 1 (or H x W) intensities in [0, 1]
        label: 1-based class; MNIST digit d is class d + 1
        threshold: Strict lower bound for foreground

    Returns:
        H x W int64 mask with values in {0, label}
    """
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise ShapeError(f"Binarization needs a single-channel image, got {image.shape[2]} channels")
        image = image[..., 0]
    elif image.ndim != 2:
        raise ShapeError(f"Binarization needs an H x W x 1 image, got shape {image.shape}")
    if label < 1:
        raise DatasetValidationError(f"Class labels are 1-based, got {label}")
    return np.where(image > threshold, label, 0).astype(np.int64)


def class_valued_mask(binary_mask: np.ndarray, label: int) -> np.ndarray:
    """Turn a {0, 1} (or any nonzero-foreground) mask into a {0, label} mask."""
    return np.where(np.asarray(binary_mask) > 0, label, 0).astype(np.int64)


def binarize_dataset(dataset: SampleCollection, threshold: float = settings.BINARIZE_THRESHOLD) -> SampleCollection:
    """Attach a binarized mask to every sample of a single-channel dataset."""
    samples = [replace(s, mask=binarize_to_mask(s.image, s.label, threshold)) for s in dataset]
    logger.info(f"Binarized {len(samples)} images of {dataset.spec.name} at threshold {threshold}")
    return dataset.with_samples(samples)


# ---------------------------------------------------------------------------
# Seg-M models
# ---------------------------------------------------------------------------

@dataclass
class SegModel:
    """A trained segmentation network used to propagate masks."""
    model_id: str
    graph: ModelGraph
    params: ModelParams

    @property
    def num_classes(self) -> int:
        return self.graph.num_classes

    @property
    def input_shape(self):
        return self.graph.input_shape

    def save(self, run_dir: Union[str, Path]):
        """Record the model id next to a training run's checkpoint."""
        atomic_write_json(Path(run_dir) / SEG_MODEL_FILENAME, {"model_id": self.model_id})

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> "SegModel":
        run_dir = Path(run_dir)
        checkpoint_dir = run_dir / CHECKPOINT_DIRNAME if (run_dir / CHECKPOINT_DIRNAME).is_dir() else run_dir
        checkpoint = Checkpoint.load(checkpoint_dir)
        if "seg" not in checkpoint.graph.heads:
            raise ConfigError(f"Checkpoint {checkpoint_dir} has no segmentation head")
        info_path = run_dir / SEG_MODEL_FILENAME
        model_id = json.loads(info_path.read_text())["model_id"] if info_path.exists() else run_dir.name
        return cls(model_id, checkpoint.graph, checkpoint.params)


def build_seg_m(dataset: SampleCollection, subset: SubsetSpec, network_cfg: NetworkConfig, train_cfg: TrainConfig,
                policy: Optional[AugmentationPolicy] = None,
                output_dir: Optional[Union[str, Path]] = None, config_hash: str = "") -> SegModel:
    """
    Train the preliminary segmentation network on M masked images per class

    Args:
        dataset: Samples with masks for at least the chosen subset
        subset: M per class and sampling seed
        network_cfg: Backbone selection
        train_cfg: Training config; the method is forced to ``cvs``
        policy: Augmentation for the masked samples
        output_dir: Run directory for checkpoint and metrics

    Returns:
        SegModel with id ``seg-<M>``

    Raises:
        MissingLabelsError: Listing subset samples without masks
    """
    chosen = take_per_class(dataset, subset)
    missing = [s.id for s in chosen if s.mask is None]
    if missing:
        raise MissingLabelsError(
            f"Seg-{subset.m} needs a mask for every subset sample; missing: {', '.join(missing[:10])}"
            + (" ..." if len(missing) > 10 else ""),
            missing,
        )
    graph = network_cfg.build("cvs", dataset.spec.image_shape, dataset.num_classes)
    config = replace(train_cfg, method="cvs").resolved(len(chosen), subset.m)
    result = train(graph, list(chosen), config, policy=policy, output_dir=output_dir, config_hash=config_hash)
    model = SegModel(f"seg-{subset.m}", result.graph, result.params)
    if output_dir is not None:
        model.save(output_dir)
    return model


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

@dataclass
class PropagationReport:
    """Bookkeeping for one propagation pass."""
    num_propagated: int
    foreground_fractions: Dict[int, float]
    source_model_id: str
    class_counts: Dict[int, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"num_propagated={self.num_propagated}", f"source_model_id={self.source_model_id}"]
        lines += [f"foreground_fraction.{c}={v!r}" for c, v in sorted(self.foreground_fractions.items())]
        lines += [f"class_count.{c}={v}" for c, v in sorted(self.class_counts.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PropagationReport":
        values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        fractions, counts = {}, {}
        for key, value in values.items():
            if key.startswith("foreground_fraction."):
                fractions[int(key.split(".", 1)[1])] = float(value)
            elif key.startswith("class_count."):
                counts[int(key.split(".", 1)[1])] = int(value)
        return cls(int(values["num_propagated"]), fractions, values["source_model_id"], counts)


def propagate_labels(seg_model: SegModel, images: Sequence[np.ndarray], batch_size: int = 64,
                     device: str = "cpu") -> Tuple[List[np.ndarray], PropagationReport]:
    """
    Label images with a Seg-M model's per-pixel argmax

    Args:
        seg_model: Trained segmentation model
        images: H x W x C images at the model's input resolution

    Returns:
        Masks in input order and a PropagationReport

    Raises:
        ShapeError: If an image does not match the model resolution
    """
    expected = tuple(seg_model.input_shape)
    for i, image in enumerate(images):
        if tuple(np.shape(image)) != expected:
            raise ShapeError(f"Image {i} has shape {tuple(np.shape(image))}, model expects {expected}")

    masks = predict_masks(seg_model.graph, seg_model.params, list(images), batch_size=batch_size, device=device)
    num_classes = seg_model.num_classes
    masks = [validate_mask(m, num_classes) for m in masks]

    total_pixels = sum(m.size for m in masks)
    histogram = np.zeros(num_classes + 1, dtype=np.int64)
    counts = {c: 0 for c in range(1, num_classes + 1)}
    for mask in masks:
        histogram += np.bincount(mask.ravel(), minlength=num_classes + 1)
        for c in np.unique(mask):
            if c > 0:
                counts[int(c)] += 1
    fractions = {c: float(histogram[c] / total_pixels) if total_pixels else 0.0 for c in range(1, num_classes + 1)}
    report = PropagationReport(len(masks), fractions, seg_model.model_id, counts)
    logger.info(f"Propagated {len(masks)} masks with {seg_model.model_id}")
    return masks, report


def relabel_foreground(masks: Sequence[np.ndarray], labels: Sequence[int]) -> List[np.ndarray]:
    """Give every foreground pixel the image's own class (for models trained on another label set)."""
    return [class_valued_mask(m, y) for m, y in zip(masks, labels)]


def merge_manual_masks(samples: Iterable[LabeledSample], propagated: Dict[str, np.ndarray],
                       keep_manual: bool = settings.KEEP_MANUAL_MASKS) -> List[LabeledSample]:
    """
    Attach propagated masks, keeping existing manual masks when ``keep_manual``

    Samples missing from ``propagated`` keep whatever mask they had.
    """
    merged = []
    for sample in samples:
        if sample.id in propagated and not (keep_manual and sample.mask is not None):
            sample = replace(sample, mask=propagated[sample.id], mask_path=None)
        merged.append(sample)
    return merged


def _image_matches(path: Optional[str], shape) -> bool:
    if path is None or not Path(path).is_file():
        return False
    with Image.open(path) as img:
        channels = len(img.getbands())
        return (img.height, img.width, channels) == tuple(shape)


def write_propagated(samples: Sequence[LabeledSample], report: Optional[PropagationReport],
                     out_dir: Union[str, Path]) -> Path:
    """
    Write masks, a manifest and (when given) the propagation report

    Images without a file on disk are written as PNGs too, so the manifest
    is self-contained.

    Returns:
        Path of the written manifest
    """
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for sample in samples:
        image_path = sample.image_path
        if not _image_matches(image_path, sample.image.shape):
            image_path = str(out_dir / "images" / f"{sample.id}.png")
            Path(image_path).parent.mkdir(parents=True, exist_ok=True)
            save_image(image_path, sample.image)
        mask_path = None
        if sample.mask is not None:
            mask_path = str(out_dir / "masks" / f"{sample.id}.png")
            save_mask(mask_path, sample.mask)
        records.append(ManifestRecord(sample.id, image_path, sample.label, mask_path))
    manifest_path = out_dir / settings.MANIFEST_FILENAME
    write_manifest(manifest_path, records)
    if report is not None:
        atomic_write_text(out_dir / settings.PROPAGATION_REPORT_FILENAME, report.to_text())
    logger.info(f"Wrote {len(records)} records to {manifest_path}")
    return manifest_path
