"""
Class scores from segmentation logits

The background channel is dropped, every class channel is averaged over
all pixels, and a softmax over the averages gives class probabilities.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from .exceptions import ConfigError, NonFiniteError, ShapeError
from .networks import ModelGraph, ModelParams, forward


@dataclass(frozen=True)
class ClassScores:
    """Per-image class logits, probabilities and the 1-based predicted class."""
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: int

    @property
    def num_classes(self) -> int:
        return len(self.logits)


def class_scores_from_seg(h) -> ClassScores:
    """
    Derive class scores from one (P+1) x H x W logit map

    Args:
        h: Segmentation logits, channel-first, channel 0 is background

    Returns:
        ClassScores; ties in the argmax go to the lowest class index

    Raises:
        ShapeError: If h is not 3-D or has no foreground channel
        NonFiniteError: If h contains NaN or inf
    """
    logits_map = torch.as_tensor(h, dtype=torch.float64)
    if logits_map.ndim != 3:
        raise ShapeError(f"Segmentation logits must be (P+1) x H x W, got shape {tuple(logits_map.shape)}")
    if logits_map.shape[0] < 2:
        raise ShapeError("Segmentation logits need at least one foreground channel (P >= 1)")
    if not torch.isfinite(logits_map).all():
        raise NonFiniteError("Segmentation logits contain non-finite values")

    logits = logits_map[1:].mean(dim=(1, 2))
    probabilities = torch.softmax(logits, dim=0)
    predicted = int(torch.argmax(probabilities)) + 1
    return ClassScores(logits.numpy(), probabilities.numpy(), predicted)


def predict_batch(graph: ModelGraph, params: ModelParams, images: Sequence, device: str = "cpu") -> List[ClassScores]:
    """
    Classify a batch of images through the segmentation head

    Args:
        graph: Model graph with a ``seg`` head
        params: Trained parameters
        images: N x C x H x W tensor or a sequence of H x W x C images
        device: Torch device for the forward pass

    Returns:
        One ClassScores per image, in input order
    """
    if "seg" not in graph.heads:
        raise ConfigError(f"Model of method {graph.method!r} has no segmentation head")
    logits = forward(graph, params, images, head="seg", device=device)
    return [class_scores_from_seg(h) for h in logits]


def predict_labels(graph: ModelGraph, params: ModelParams, images: Sequence, batch_size: int = 64,
                   device: str = "cpu") -> np.ndarray:
    """
    Predicted 1-based classes for any method

    Models with a classification head (classification, multitask) use
    its argmax; segmentation-only models go through ``class_scores_from_seg``.
    """
    predictions = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        if "clf" in graph.heads:
            scores = forward(graph, params, chunk, head="clf", device=device)
            predictions.extend((torch.argmax(scores, dim=1) + 1).tolist())
        else:
            predictions.extend(s.predicted for s in predict_batch(graph, params, chunk, device=device))
    return np.asarray(predictions, dtype=np.int64)


def predict_masks(graph: ModelGraph, params: ModelParams, images: Sequence, batch_size: int = 64,
                  device: str = "cpu") -> List[np.ndarray]:
    """Per-pixel argmax of the segmentation head; ties go to the lowest channel."""
    if "seg" not in graph.heads:
        raise ConfigError(f"Model of method {graph.method!r} has no segmentation head")
    masks = []
    for start in range(0, len(images), batch_size):
        logits = forward(graph, params, images[start:start + batch_size], head="seg", device=device)
        if not torch.isfinite(logits).all():
            raise NonFiniteError("Segmentation logits contain non-finite values")
        masks.extend(m.numpy().astype(np.int64) for m in torch.argmax(logits, dim=1))
    return masks
