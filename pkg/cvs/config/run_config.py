"""
Run configuration
Defaults, config files and CLI overrides merged into one resolved document
"""

import copy
import json
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from loguru import logger

from . import settings
from ..augmentation import AugmentationPolicy, default_policy
from ..datasets import DatasetSpec, SubsetSpec, builtin_spec
from ..exceptions import ConfigError
from ..networks import NetworkConfig
from ..training import TrainConfig
from ..utils.helpers import atomic_write_json, config_hash

DEFAULTS: Dict[str, Any] = {
    "dataset": {
        "name": "synthetic-shapes",
        "manifest": None,
        "test_manifest": None,
        "num_classes": None,
        "image_shape": None,
        "size": None,
        "test_size": None,
        "binary_masks": False,
        "input_size": None,
        "seed": 0,
    },
    "subset": {"m": "all", "seed": settings.DEFAULT_SEED},
    "network": NetworkConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "augmentation": None,
    "labels": {
        "mode": "manual",
        "threshold": settings.BINARIZE_THRESHOLD,
        "keep_manual": settings.KEEP_MANUAL_MASKS,
        "seg_model": None,
        "seg_labeled": None,
    },
    "output_dir": None,
}

LABEL_MODES = ("manual", "binarize", "propagate")
# sections whose values are free-form rather than keyed
_OPAQUE = {"augmentation", "output_dir"}


def _check_keys(document: Dict, template: Dict, path: str = ""):
    for key, value in document.items():
        where = f"{path}{key}"
        if key not in template:
            raise ConfigError(f"Unknown config key: {where}")
        if key in _OPAQUE and not path:
            continue
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key {where} must be a mapping")
            _check_keys(value, template[key], f"{where}.")


def _merge(base: Dict, update: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _drop_none(overrides: Dict) -> Dict:
    cleaned = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            value = _drop_none(value)
            if value:
                cleaned[key] = value
        elif value is not None:
            cleaned[key] = value
    return cleaned


def load_config_file(path: Union[str, Path]) -> Dict:
    """Read a JSON config file; a resolved ``config.json`` is unwrapped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if isinstance(data, dict) and "config" in data and "config_hash" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


class RunConfig:
    """
    Fully resolved run configuration

    Precedence: CLI overrides > config file > built-in defaults. The
    document is validated on construction and hashed for artifact stamps.
    """

    def __init__(self, document: Dict):
        _check_keys(document, DEFAULTS)
        self.document = _merge(DEFAULTS, document)
        self._validate()

    @classmethod
    def resolve(cls, config_file: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict] = None) -> "RunConfig":
        document = load_config_file(config_file) if config_file else {}
        _check_keys(document, DEFAULTS)
        overrides = _drop_none(overrides or {})
        _check_keys(overrides, DEFAULTS)
        return cls(_merge(document, overrides))

    def _validate(self):
        # constructing the typed views raises ConfigError on bad values
        self.network_config()
        self.train_config()
        self.subset_spec()
        labels = self.document["labels"]
        if labels["mode"] not in LABEL_MODES:
            raise ConfigError(f"labels.mode must be one of {LABEL_MODES}, got {labels['mode']!r}")
        if labels["mode"] == "propagate" and not labels["seg_model"]:
            raise ConfigError("labels.mode=propagate needs labels.seg_model")
        if self.document["augmentation"] is not None:
            AugmentationPolicy.from_config(self.document["augmentation"])
        dataset = self.document["dataset"]
        if not dataset["manifest"] and dataset["name"] not in settings.BUILTIN_DATASETS:
            raise ConfigError(f"Dataset {dataset['name']!r} is not built in; give dataset.manifest")
        if dataset["manifest"] and (not dataset["num_classes"] or not dataset["image_shape"]):
            raise ConfigError("Manifest datasets need dataset.num_classes and dataset.image_shape")

    # -- typed views --------------------------------------------------------

    @property
    def hash(self) -> str:
        return config_hash(self.document)

    @property
    def method(self) -> str:
        return self.document["train"]["method"]

    @property
    def seed(self) -> int:
        return self.document["train"]["seed"]

    @property
    def dataset_name(self) -> str:
        return self.document["dataset"]["name"]

    @property
    def output_dir(self) -> Path:
        if self.document["output_dir"]:
            return Path(self.document["output_dir"])
        return Path(settings.OUTPUT_ROOT) / f"{self.dataset_name}-{self.method}-m{self.document['subset']['m']}-s{self.seed}"

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.document["network"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.document["train"])

    def subset_spec(self) -> SubsetSpec:
        subset = self.document["subset"]
        return SubsetSpec.parse(subset["m"], seed=subset["seed"])

    def dataset_spec(self, split: str = "train") -> DatasetSpec:
        """Dataset spec for a split, with the backbone's input size and channels applied."""
        dataset = self.document["dataset"]
        size = dataset["size"] if split == "train" else dataset["test_size"]
        if dataset["manifest"]:
            source = dataset["manifest"] if split == "train" else dataset["test_manifest"]
            if not source:
                raise ConfigError(f"No manifest configured for the {split} split")
            spec = DatasetSpec(
                name=dataset["name"],
                num_classes=int(dataset["num_classes"]),
                image_shape=tuple(dataset["image_shape"]),
                size=size,
                source=str(source),
                split=split,
                binary_masks=bool(dataset["binary_masks"]),
                seed=dataset["seed"],
            )
        else:
            spec = builtin_spec(dataset["name"], split, seed=dataset["seed"],
                                size=size if dataset["name"] == "synthetic-shapes" else None)
            if size is not None and dataset["name"] != "synthetic-shapes":
                raise ConfigError("dataset.size can only be set for synthetic-shapes or manifests")
            spec = replace(spec, binary_masks=bool(dataset["binary_masks"]))

        height, width, channels = spec.image_shape
        input_size = dataset["input_size"]
        if not input_size and self.document["network"]["backbone"] == "resnet101":
            input_size = settings.HRF_INPUT_SIZE if spec.binary_masks else settings.RESNET101_INPUT_SIZE
        if input_size:
            height = width = int(input_size)
            spec = replace(spec, resize=True)
        if self.document["network"]["backbone"] == "resnet101":
            channels = 3
        return replace(spec, image_shape=(height, width, channels))

    def augmentation_policy(self, method: Optional[str] = None) -> AugmentationPolicy:
        if self.document["augmentation"] is not None:
            return AugmentationPolicy.from_config(self.document["augmentation"])
        return default_policy(self.dataset_name, method or self.method,
                              fundus=bool(self.document["dataset"]["binary_masks"]))

    def with_overrides(self, overrides: Dict) -> "RunConfig":
        overrides = _drop_none(overrides)
        _check_keys(overrides, DEFAULTS)
        return RunConfig(_merge(self.document, overrides))

    def to_dict(self) -> Dict:
        return copy.deepcopy(self.document)

    def write(self, directory: Union[str, Path]) -> Path:
        """Write ``config.json`` with hash and format tag into ``directory``."""
        path = Path(directory) / settings.CONFIG_FILENAME
        atomic_write_json(path, {
            "config": self.document,
            "config_hash": self.hash,
            "format_version": settings.FORMAT_VERSION,
        })
        logger.debug(f"Wrote resolved config {self.hash[:12]} to {path}")
        return path
