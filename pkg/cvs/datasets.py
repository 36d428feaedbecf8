"""
Dataset ingestion
Manifest handling, built-in dataset readers and per-class subset sampling
"""

import gzip
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image

from .config import settings
from .exceptions import ConfigError, DatasetLoadError, DatasetValidationError

ALL = "all"


@dataclass(frozen=True)
class DatasetSpec:
    """
    Where a dataset comes from and what it must look like

    ``source`` is a manifest path, or ``None`` / a built-in identifier for
    the built-in readers. ``size`` is the expected number of samples; ``None``
    accepts whatever the source holds.
    """
    name: str
    num_classes: int
    image_shape: Tuple[int, int, int]
    size: Optional[int] = None
    source: Optional[str] = None
    split: str = "train"
    binary_masks: bool = False
    resize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be (H, W, C) with positive entries, got {self.image_shape}")
        if self.size is not None and self.size < 1:
            raise ConfigError(f"size must be >= 1, got {self.size}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def is_builtin(self) -> bool:
        return self.source is None or self.source in settings.BUILTIN_DATASETS


@dataclass
class LabeledSample:
    """One ``(x, s, y)`` triple: image, optional mask, 1-based class label."""
    id: str
    image: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None
    image_path: Optional[str] = None
    mask_path: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.image.shape)


@dataclass(frozen=True)
class SubsetSpec:
    """``m`` samples per class (an integer or ``"all"``) drawn with ``seed``."""
    m: Union[int, str] = ALL
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.m, str):
            if self.m.lower() != ALL:
                raise ConfigError(f"M must be a positive integer or 'all', got {self.m!r}")
            object.__setattr__(self, "m", ALL)
        elif int(self.m) < 1:
            raise ConfigError(f"M must be >= 1, got {self.m}")

    @property
    def is_all(self) -> bool:
        return self.m == ALL

    @classmethod
    def parse(cls, text: Union[str, int], seed: int = 0) -> "SubsetSpec":
        if isinstance(text, str) and text.lower() != ALL:
            try:
                text = int(text)
            except ValueError:
                raise ConfigError(f"M must be a positive integer or 'all', got {text!r}")
        return cls(m=text, seed=seed)


class SampleCollection:
    """
    Immutable, id-ordered collection of ``LabeledSample``
    """

    def __init__(self, spec: DatasetSpec, samples: Iterable[LabeledSample]):
        self.spec = spec
        ordered = sorted(samples, key=lambda s: s.id)
        self._samples: Tuple[LabeledSample, ...] = tuple(ordered)
        self._index: Dict[str, int] = {}
        for i, sample in enumerate(self._samples):
            if sample.id in self._index:
                raise DatasetValidationError(f"Duplicate sample id: {sample.id}")
            self._index[sample.id] = i

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self._samples)

    def __getitem__(self, key: Union[int, str]) -> LabeledSample:
        if isinstance(key, str):
            return self._samples[self._index[key]]
        return self._samples[key]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self._samples]

    @property
    def labels(self) -> List[int]:
        return [s.label for s in self._samples]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def ids_by_class(self) -> Dict[int, List[str]]:
        groups: Dict[int, List[str]] = {c: [] for c in range(1, self.spec.num_classes + 1)}
        for sample in self._samples:
            groups[sample.label].append(sample.id)
        return groups

    def subset(self, ids: Sequence[str]) -> "SampleCollection":
        return SampleCollection(self.spec, [self[i] for i in ids])

    def with_samples(self, samples: Iterable[LabeledSample]) -> "SampleCollection":
        return SampleCollection(self.spec, samples)


# ---------------------------------------------------------------------------
# Image and mask files
# ---------------------------------------------------------------------------

def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read an image file into an ``H x W x C`` float32 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            array = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetLoadError(f"Cannot read image {path}: {e}")
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Read a single-channel 8-bit mask where pixel value = class index."""
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"Mask not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "1"):
                raise DatasetValidationError(f"Mask must be single-channel, got mode {img.mode}: {path}")
            array = np.asarray(img).astype(np.int64)
    except OSError as e:
        raise DatasetLoadError(f"Cannot read mask {path}: {e}")
    return array


def save_image(path: Union[str, Path], image: np.ndarray):
    array = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if array.shape[-1] == 1:
        array = array[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def save_mask(path: Union[str, Path], mask: np.ndarray):
    """Write a mask losslessly as an 8-bit PNG."""
    if mask.max(initial=0) > 255:
        raise DatasetValidationError(f"Mask values above 255 cannot be stored as 8-bit: {path}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    image_path: str
    label: int
    mask_path: Optional[str] = None


def read_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    """
    Parse ``id<TAB>image_path<TAB>label<TAB>mask_path_or_dash`` records

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"Manifest not found: {path}")
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DatasetValidationError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            sample_id, image_path, label_text, mask_text = fields
            try:
                label = int(label_text)
            except ValueError:
                raise DatasetValidationError(f"{path}:{lineno}: label is not an integer: {label_text!r}")
            mask_path = None if mask_text == "-" else str((base / mask_text).resolve())
            records.append(ManifestRecord(sample_id, str((base / image_path).resolve()), label, mask_path))
    return records


def write_manifest(path: Union[str, Path], records: Iterable[ManifestRecord]):
    """Write records with paths relative to the manifest directory when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def _rel(p: Optional[str]) -> str:
        if p is None:
            return "-"
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = [f"{r.id}\t{_rel(r.image_path)}\t{r.label}\t{_rel(r.mask_path)}" for r in records]
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    tmp.replace(path)


def _load_manifest_samples(spec: DatasetSpec) -> List[LabeledSample]:
    records = read_manifest(spec.source)
    samples = []
    for r in records:
        image = load_image(r.image_path)
        mask = load_mask(r.mask_path) if r.mask_path else None
        samples.append(LabeledSample(r.id, image, r.label, mask, image_path=r.image_path, mask_path=r.mask_path))
    return samples


# ---------------------------------------------------------------------------
# Built-in datasets (local files only)
# ---------------------------------------------------------------------------

def builtin_spec(name: str, split: str = "train", seed: int = 0, size: Optional[int] = None) -> DatasetSpec:
    """
    Dataset spec for a built-in identifier

    Args:
        name: One of ``mnist``, ``cifar10``, ``cifar100``, ``synthetic-shapes``
        split: ``train`` or ``test``
        seed: Generator seed (synthetic data only)
        size: Override the sample count (synthetic data only)
    """
    if name not in settings.BUILTIN_DATASETS:
        raise ConfigError(f"Unknown built-in dataset {name!r}; choose from {sorted(settings.BUILTIN_DATASETS)}")
    info = settings.BUILTIN_DATASETS[name]
    if size is not None and name != "synthetic-shapes":
        raise ConfigError(f"size can only be overridden for synthetic-shapes, not {name}")
    return DatasetSpec(
        name=name,
        num_classes=info["num_classes"],
        image_shape=tuple(info["image_shape"]),
        size=size if size is not None else info[split],
        source=name,
        split=split,
        seed=seed,
    )


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz_path = path.with_name(path.name + ".gz")
    if gz_path.exists():
        return gzip.open(gz_path, "rb")
    raise DatasetLoadError(f"Missing dataset file: {path} (or {gz_path.name}); place the files under CVS_DATA_ROOT")


def _read_idx(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        data = f.read()
    magic, = struct.unpack(">I", data[:4])
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _load_mnist(split: str, data_root: Path) -> List[LabeledSample]:
    prefix = "train" if split == "train" else "t10k"
    root = data_root / "mnist"
    images = _read_idx(root / f"{prefix}-images-idx3-ubyte")
    labels = _read_idx(root / f"{prefix}-labels-idx1-ubyte")
    width = len(str(len(images)))
    return [
        # digit d is class d + 1
        LabeledSample(f"{split}-{i:0{width}d}", (img.astype(np.float32) / 255.0)[:, :, None], int(lbl) + 1)
        for i, (img, lbl) in enumerate(zip(images, labels))
    ]


def _unpickle(path: Path) -> Dict:
    if not path.exists():
        raise DatasetLoadError(f"Missing dataset file: {path}; place the files under CVS_DATA_ROOT")
    with open(path, "rb") as f:
        return pickle.load(f, encoding="bytes")


def _load_cifar(name: str, split: str, data_root: Path) -> List[LabeledSample]:
    if name == "cifar10":
        root = data_root / "cifar-10-batches-py"
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        label_key = b"labels"
    else:
        root = data_root / "cifar-100-python"
        files = ["train"] if split == "train" else ["test"]
        label_key = b"fine_labels"
    arrays, labels = [], []
    for filename in files:
        batch = _unpickle(root / filename)
        arrays.append(np.asarray(batch[b"data"], dtype=np.uint8))
        labels.extend(batch[label_key])
    data = np.concatenate(arrays).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    width = len(str(len(data)))
    return [
        LabeledSample(f"{split}-{i:0{width}d}", img.astype(np.float32) / 255.0, int(lbl) + 1)
        for i, (img, lbl) in enumerate(zip(data, labels))
    ]


def generate_synthetic_shapes(
    n: int,
    seed: int = 0,
    size: int = 32,
    num_classes: int = 3,
    prefix: str = "shape",
) -> List[LabeledSample]:
    """
    Generate a balanced set of shape images with exact masks

    Class 1 is a square, class 2 a disk, class 3 a triangle; each foreground
    is tinted towards its class colour on a dark, noisy background.

    Args:
        n: Number of samples (labels cycle 1..P so classes stay balanced)
        seed: Generator seed
        size: Image side length
        num_classes: Number of shape classes (1 to 3)
        prefix: Id prefix

    Returns:
        List of samples with ``H x W x 3`` images and class-valued masks
    """
    if not 1 <= num_classes <= 3:
        raise ConfigError(f"synthetic-shapes supports 1 to 3 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    tints = np.array([[1.0, 0.35, 0.35], [0.35, 1.0, 0.35], [0.35, 0.35, 1.0]], dtype=np.float32)
    rows, cols = np.mgrid[0:size, 0:size]
    width = len(str(n))
    samples = []
    for i in range(n):
        label = i % num_classes + 1
        radius = rng.uniform(size * 0.18, size * 0.3)
        cy, cx = rng.uniform(radius + 1, size - radius - 1, size=2)
        if label == 1:
            fg = (np.abs(rows - cy) <= radius * 0.85) & (np.abs(cols - cx) <= radius * 0.85)
        elif label == 2:
            fg = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        else:
            # apex up, base at cy + radius
            top = cy - radius
            half_width = (rows - top) / 2.0 * 1.15
            fg = (rows >= top) & (rows <= cy + radius) & (np.abs(cols - cx) <= half_width)
        image = rng.uniform(0.0, 0.25, size=(size, size, 3)).astype(np.float32)
        brightness = rng.uniform(0.7, 1.0)
        colour = np.clip(tints[label - 1] * brightness + rng.normal(0, 0.05, 3), 0, 1)
        image[fg] = np.clip(colour + rng.normal(0, 0.04, size=(int(fg.sum()), 3)), 0, 1)
        mask = np.where(fg, label, 0).astype(np.int64)
        samples.append(LabeledSample(f"{prefix}-{i:0{width}d}", image, label, mask))
    return samples


def _load_builtin(spec: DatasetSpec, data_root: Path) -> List[LabeledSample]:
    name = spec.source or spec.name
    if name == "synthetic-shapes":
        # test split uses a different stream than train
        seed = spec.seed if spec.split == "train" else spec.seed + 1_000_003
        return generate_synthetic_shapes(
            spec.size or settings.BUILTIN_DATASETS[name][spec.split],
            seed=seed,
            size=spec.image_shape[0],
            num_classes=spec.num_classes,
            prefix=spec.split,
        )
    if name == "mnist":
        return _load_mnist(spec.split, data_root)
    if name in ("cifar10", "cifar100"):
        return _load_cifar(name, spec.split, data_root)
    raise ConfigError(f"Unknown built-in dataset {name!r}")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_sample(sample: LabeledSample, spec: DatasetSpec):
    """Check one sample against the dataset spec; raise DatasetValidationError."""
    if not 1 <= sample.label <= spec.num_classes:
        raise DatasetValidationError(
            f"Sample {sample.id}: label {sample.label} outside 1..{spec.num_classes}"
        )
    if sample.image.ndim != 3:
        raise DatasetValidationError(f"Sample {sample.id}: image must be H x W x C, got shape {sample.image.shape}")
    if tuple(sample.image.shape) != tuple(spec.image_shape):
        raise DatasetValidationError(
            f"Sample {sample.id}: image shape {sample.image.shape} does not match {tuple(spec.image_shape)}"
        )
    if sample.mask is not None:
        if sample.mask.shape != sample.image.shape[:2]:
            raise DatasetValidationError(
                f"Sample {sample.id}: mask shape {sample.mask.shape} does not match image {sample.image.shape[:2]}"
            )
        if sample.mask.min(initial=0) < 0 or sample.mask.max(initial=0) > spec.num_classes:
            raise DatasetValidationError(f"Sample {sample.id}: mask values outside 0..{spec.num_classes}")


def load_dataset(spec: DatasetSpec, data_root: Optional[Union[str, Path]] = None) -> SampleCollection:
    """
    Load a dataset into an immutable, id-ordered collection

    Args:
        spec: Dataset spec (manifest path or built-in identifier)
        data_root: Root for built-in dataset files (default: CVS_DATA_ROOT)

    Returns:
        SampleCollection with every sample validated against ``spec``
    """
    data_root = Path(data_root or settings.DATA_ROOT)
    if spec.is_builtin:
        samples = _load_builtin(spec, data_root)
    else:
        samples = _load_manifest_samples(spec)

    if not samples:
        raise DatasetValidationError(f"Dataset {spec.name!r} is empty: {spec.source}")

    # imported here to keep augmentation free of dataset-loading imports
    from .augmentation import resize_sample, to_three_channels
    from .label_synthesis import class_valued_mask

    height, width, channels = spec.image_shape
    prepared = []
    for sample in samples:
        if spec.binary_masks and sample.mask is not None:
            sample.mask = class_valued_mask(sample.mask, sample.label)
        if spec.resize and sample.image.shape[:2] != (height, width):
            sample = resize_sample(sample, (height, width))
        if channels == 3 and sample.image.shape[2] == 1:
            sample = to_three_channels(sample)
        validate_sample(sample, spec)
        prepared.append(sample)

    if spec.size is not None and len(prepared) != spec.size:
        raise DatasetValidationError(
            f"Dataset {spec.name!r} has {len(prepared)} samples, expected {spec.size}"
        )
    collection = SampleCollection(spec, prepared)
    logger.info(f"Loaded {len(collection)} samples from {spec.name} ({spec.split})")
    return collection


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------

def sample_per_class(dataset: SampleCollection, subset: SubsetSpec) -> List[str]:
    """
    Draw exactly M ids per class

    Each class is sampled with its own generator derived from the seed, so
    results depend only on (dataset, M, seed).

    Returns:
        Ids grouped by class in class order, sorted within a class
    """
    if subset.is_all:
        return dataset.ids
    m = int(subset.m)
    groups = dataset.ids_by_class()
    chosen = []
    for label, ids in groups.items():
        if m > len(ids):
            raise DatasetValidationError(
                f"M={m} exceeds the population of class {label} ({len(ids)} samples)"
            )
        rng = np.random.default_rng([subset.seed, label])
        picks = rng.choice(len(ids), size=m, replace=False)
        chosen.extend(sorted(ids[i] for i in picks))
    return chosen


def take_per_class(dataset: SampleCollection, subset: SubsetSpec) -> SampleCollection:
    """``sample_per_class`` materialized as a collection."""
    return dataset.subset(sample_per_class(dataset, subset))


def class_counts(samples: Iterable[LabeledSample], num_classes: int) -> Dict[int, int]:
    counts = {c: 0 for c in range(1, num_classes + 1)}
    for sample in samples:
        counts[sample.label] += 1
    return counts
