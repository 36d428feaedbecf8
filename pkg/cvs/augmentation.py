"""
Paired image/mask augmentation

Geometric transforms move image and mask together with identical
parameters; masks are always resampled nearest-neighbour so they keep
integer class ids. Photometric transforms touch the image only.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import settings
from .datasets import LabeledSample
from .exceptions import ConfigError

GEOMETRIC_KINDS = {"rotate", "shift_zoom", "horizontal_flip", "crop_resize"}
PHOTOMETRIC_KINDS = {"gaussian_noise", "color_distort"}

_DEFAULT_PARAMS = {
    "rotate": {"max_degrees": settings.ROTATE_MAX_DEGREES, "exact90": None},
    "shift_zoom": {"max_shift_frac": settings.SHIFT_MAX_FRAC, "zoom_range": settings.ZOOM_RANGE},
    "gaussian_noise": {"sigma": settings.NOISE_SIGMA},
    "color_distort": {"strength": settings.COLOR_STRENGTH},
    "horizontal_flip": {"prob": settings.FLIP_PROB},
    "crop_resize": {"scale_range": settings.CROP_SCALE_RANGE},
}


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class TransformSpec:
    """One transform descriptor with validated parameters."""
    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEFAULT_PARAMS:
            raise ConfigError(f"Unknown transform {self.kind!r}; choose from {sorted(_DEFAULT_PARAMS)}")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ConfigError(f"Unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        self._validate()

    def _validate(self):
        p = self.params
        if self.kind == "rotate":
            _check(0.0 <= float(p["max_degrees"]) <= 180.0, f"rotate.max_degrees must be in [0, 180], got {p['max_degrees']}")
            _check(p["exact90"] is None or int(p["exact90"]) == p["exact90"], "rotate.exact90 must be an integer number of quarter turns")
        elif self.kind == "shift_zoom":
            _check(0.0 <= float(p["max_shift_frac"]) <= 0.5, f"shift_zoom.max_shift_frac must be in [0, 0.5], got {p['max_shift_frac']}")
            lo, hi = p["zoom_range"]
            _check(0.0 < lo <= hi <= 4.0, f"shift_zoom.zoom_range must satisfy 0 < lo <= hi <= 4, got {p['zoom_range']}")
        elif self.kind == "gaussian_noise":
            _check(0.0 <= float(p["sigma"]) <= 1.0, f"gaussian_noise.sigma must be in [0, 1], got {p['sigma']}")
        elif self.kind == "color_distort":
            _check(0.0 <= float(p["strength"]) <= 1.0, f"color_distort.strength must be in [0, 1], got {p['strength']}")
        elif self.kind == "horizontal_flip":
            _check(0.0 <= float(p["prob"]) <= 1.0, f"horizontal_flip.prob must be in [0, 1], got {p['prob']}")
        elif self.kind == "crop_resize":
            lo, hi = p["scale_range"]
            _check(0.0 < lo <= hi <= 1.0, f"crop_resize.scale_range must satisfy 0 < lo <= hi <= 1, got {p['scale_range']}")

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    def to_config(self) -> Dict:
        out = {"kind": self.kind}
        for key, value in self.params.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered chain of transform descriptors."""
    transforms: Tuple[TransformSpec, ...] = ()

    @classmethod
    def from_config(cls, items: Optional[Sequence[Mapping]]) -> "AugmentationPolicy":
        transforms = []
        for item in items or []:
            item = dict(item)
            if "kind" not in item:
                raise ConfigError(f"Transform descriptor without 'kind': {item}")
            kind = item.pop("kind")
            transforms.append(TransformSpec(kind, item))
        return cls(tuple(transforms))

    def to_config(self) -> List[Dict]:
        return [t.to_config() for t in self.transforms]

    def __len__(self) -> int:
        return len(self.transforms)


def default_policy(dataset: str, method: str, fundus: bool = False) -> AugmentationPolicy:
    """
    Built-in policy for a dataset and method

    CvS-style methods (cvs, segmentation-only) use the per-dataset policy;
    classification and multitask use crop-and-resize with flips; fundus
    data uses flips and rotations for every method.
    """
    policies = settings.AUGMENTATION_POLICIES
    if fundus:
        return AugmentationPolicy.from_config(policies[("fundus", "any")])
    if method in ("cvs", "segmentation-only"):
        return AugmentationPolicy.from_config(policies.get((dataset, "cvs"), []))
    return AugmentationPolicy.from_config(policies[("default", "baseline")])


# ---------------------------------------------------------------------------
# Resampling helpers
# ---------------------------------------------------------------------------

def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` float image to an exact (H, W)."""
    height, width = size
    channels = [
        np.asarray(Image.fromarray(image[:, :, c].astype(np.float32)).resize((width, height), Image.BILINEAR))
        for c in range(image.shape[2])
    ]
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an integer mask to an exact (H, W)."""
    height, width = size
    resized = Image.fromarray(mask.astype(np.int32)).resize((width, height), Image.NEAREST)
    return np.asarray(resized).astype(np.int64)


def resize_sample(sample: LabeledSample, size: Tuple[int, int]) -> LabeledSample:
    """Resize image (bilinear) and mask (nearest) to ``size``."""
    mask = resize_mask(sample.mask, size) if sample.mask is not None else None
    return replace(sample, image=resize_image(sample.image, size), mask=mask)


def to_three_channels(sample: LabeledSample) -> LabeledSample:
    """Replicate a single-channel image to three channels."""
    if sample.image.shape[2] == 3:
        return sample
    return replace(sample, image=np.repeat(sample.image, 3, axis=2))


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _affine(array: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    """Apply a 2-D spatial affine map (input = matrix @ output + offset)."""
    if array.ndim == 3:
        full = np.eye(3)
        full[:2, :2] = matrix
        return ndimage.affine_transform(array, full, offset=np.append(offset, 0.0), order=order, mode="constant", cval=0.0)
    return ndimage.affine_transform(array, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def _rotation_params(height: int, width: int, degrees: float):
    theta = math.radians(degrees)
    # output -> input mapping rotates by -theta around the image centre
    matrix = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    offset = center - matrix @ center
    return matrix, offset


def _rotate(image, mask, params, rng):
    if params["exact90"] is not None:
        k = int(params["exact90"]) % 4
        image = np.rot90(image, k, axes=(0, 1))
        mask = np.rot90(mask, k, axes=(0, 1)) if mask is not None else None
        return image, mask
    angle = rng.uniform(-params["max_degrees"], params["max_degrees"])
    matrix, offset = _rotation_params(image.shape[0], image.shape[1], angle)
    image = _affine(image, matrix, offset, order=1)
    mask = _affine(mask, matrix, offset, order=0) if mask is not None else None
    return image, mask


def _shift_zoom(image, mask, params, rng):
    height, width = image.shape[:2]
    zoom = rng.uniform(*params["zoom_range"])
    frac = params["max_shift_frac"]
    shift = np.array([rng.uniform(-frac, frac) * height, rng.uniform(-frac, frac) * width])
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    matrix = np.eye(2) / zoom
    offset = center - (center + shift) / zoom
    image = _affine(image, matrix, offset, order=1)
    mask = _affine(mask, matrix, offset, order=0) if mask is not None else None
    return image, mask


def _horizontal_flip(image, mask, params, rng):
    if rng.random() < params["prob"]:
        image = image[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    return image, mask


def _crop_resize(image, mask, params, rng):
    height, width = image.shape[:2]
    side = math.sqrt(rng.uniform(*params["scale_range"]))
    crop_h = max(1, int(round(height * side)))
    crop_w = max(1, int(round(width * side)))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    image = resize_image(np.ascontiguousarray(image[top:top + crop_h, left:left + crop_w]), (height, width))
    if mask is not None:
        mask = resize_mask(np.ascontiguousarray(mask[top:top + crop_h, left:left + crop_w]), (height, width))
    return image, mask


def _gaussian_noise(image, params, rng):
    return image + rng.normal(0.0, params["sigma"], size=image.shape).astype(np.float32)


def _color_distort(image, params, rng):
    strength = params["strength"]
    brightness = 1.0 + rng.uniform(-strength, strength)
    contrast = 1.0 + rng.uniform(-strength, strength)
    saturation = 1.0 + rng.uniform(-strength, strength)
    out = image * brightness
    mean = out.mean()
    out = mean + contrast * (out - mean)
    if out.shape[2] == 3:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + saturation * (out - gray)
    return out


_GEOMETRIC = {
    "rotate": _rotate,
    "shift_zoom": _shift_zoom,
    "horizontal_flip": _horizontal_flip,
    "crop_resize": _crop_resize,
}
_PHOTOMETRIC = {
    "gaussian_noise": _gaussian_noise,
    "color_distort": _color_distort,
}


def augment(sample: LabeledSample, policy: AugmentationPolicy, seed: int) -> LabeledSample:
    """
    Apply a policy to one sample

    Args:
        sample: Input sample with image in [0, 1]
        policy: Ordered transform chain
        seed: Seed for every random draw of this call

    Returns:
        New sample; image clamped to [0, 1], mask moved by the geometric
        sub-chain only, label unchanged
    """
    if len(policy) == 0:
        return sample
    rng = np.random.default_rng(seed)
    image = sample.image.astype(np.float32, copy=True)
    mask = sample.mask
    for transform in policy.transforms:
        if transform.geometric:
            image, mask = _GEOMETRIC[transform.kind](image, mask, transform.params, rng)
        else:
            image = _PHOTOMETRIC[transform.kind](image, transform.params, rng)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if mask is not None:
        mask = np.ascontiguousarray(mask).astype(np.int64)
    return replace(sample, image=np.ascontiguousarray(image), mask=mask)


def augment_mask(mask: np.ndarray, policy: AugmentationPolicy, seed: int, channels: int = 1) -> np.ndarray:
    """
    Move a mask alone exactly as ``augment`` would move it with the same seed

    A zero image with ``channels`` channels stands in for the image so the
    random draws line up with ``augment`` on a sample of that shape.
    """
    placeholder = np.zeros(mask.shape + (channels,), dtype=np.float32)
    result = augment(LabeledSample("mask", placeholder, 1, mask), policy, seed)
    return result.mask
