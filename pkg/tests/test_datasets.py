from pathlib import Path

import numpy as np
import pytest

from cvs.config import settings
from cvs.datasets import (
    ALL,
    DatasetSpec,
    ManifestRecord,
    SubsetSpec,
    builtin_spec,
    class_counts,
    load_dataset,
    read_manifest,
    sample_per_class,
    save_image,
    save_mask,
    write_manifest,
)
from cvs.exceptions import ConfigError, DatasetLoadError, DatasetValidationError


def _write_samples(root: Path, labels, shape=(4, 4, 1), with_masks=True):
    rng = np.random.default_rng(0)
    records = []
    for i, label in enumerate(labels):
        image_path = root / "images" / f"s{i}.png"
        save_image(image_path, rng.uniform(0, 1, size=shape).astype(np.float32))
        mask_path = None
        if with_masks:
            mask_path = root / "masks" / f"s{i}.png"
            mask = np.zeros(shape[:2], dtype=np.int64)
            mask[0, 0] = label
            save_mask(mask_path, mask)
        records.append(ManifestRecord(f"s{i}", str(image_path), label, str(mask_path) if mask_path else None))
    manifest = root / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest


class TestLoadDataset:

    def test_synthetic_shapes_are_balanced(self, tmp_path):
        spec = builtin_spec("synthetic-shapes", "train", seed=0, size=30)
        dataset = load_dataset(spec, data_root=tmp_path)
        assert len(dataset) == 30
        assert class_counts(dataset, 3) == {1: 10, 2: 10, 3: 10}
        assert all(s.mask is not None for s in dataset)

    def test_synthetic_masks_match_labels(self, shapes):
        for sample in shapes:
            assert set(np.unique(sample.mask)) <= {0, sample.label}
            assert (sample.mask > 0).any()

    def test_manifest_round_trip(self, tmp_path):
        manifest = _write_samples(tmp_path, [1, 2, 2])
        spec = DatasetSpec("toy", num_classes=2, image_shape=(4, 4, 1), size=3, source=str(manifest))
        dataset = load_dataset(spec)
        assert dataset.ids == ["s0", "s1", "s2"]
        assert dataset.labels == [1, 2, 2]
        assert dataset["s1"].mask[0, 0] == 2
        assert dataset["s1"].image.shape == (4, 4, 1)

    def test_manifest_without_masks(self, tmp_path):
        manifest = _write_samples(tmp_path, [1, 2], with_masks=False)
        records = read_manifest(manifest)
        assert [r.mask_path for r in records] == [None, None]
        spec = DatasetSpec("toy", num_classes=2, image_shape=(4, 4, 1), source=str(manifest))
        assert all(s.mask is None for s in load_dataset(spec))

    def test_empty_manifest_is_an_error(self, tmp_path):
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("")
        spec = DatasetSpec("empty", num_classes=2, image_shape=(4, 4, 1), source=str(manifest))
        with pytest.raises(DatasetValidationError):
            load_dataset(spec)

    def test_missing_source(self, tmp_path):
        spec = DatasetSpec("gone", num_classes=2, image_shape=(4, 4, 1), source=str(tmp_path / "nope.tsv"))
        with pytest.raises(DatasetLoadError):
            load_dataset(spec)

    def test_missing_builtin_files(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            load_dataset(builtin_spec("cifar10", "test"), data_root=tmp_path)

    def test_label_outside_range(self, tmp_path):
        manifest = _write_samples(tmp_path, [1, 3], with_masks=False)
        spec = DatasetSpec("toy", num_classes=2, image_shape=(4, 4, 1), source=str(manifest))
        with pytest.raises(DatasetValidationError, match="s1"):
            load_dataset(spec)

    def test_size_mismatch(self, tmp_path):
        manifest = _write_samples(tmp_path, [1, 2], with_masks=False)
        spec = DatasetSpec("toy", num_classes=2, image_shape=(4, 4, 1), size=5, source=str(manifest))
        with pytest.raises(DatasetValidationError, match="expected 5"):
            load_dataset(spec)

    def test_resize_and_channel_expansion(self, tmp_path):
        manifest = _write_samples(tmp_path, [1, 2])
        spec = DatasetSpec("toy", num_classes=2, image_shape=(8, 8, 3), source=str(manifest), resize=True)
        dataset = load_dataset(spec)
        assert dataset["s0"].image.shape == (8, 8, 3)
        assert dataset["s0"].mask.shape == (8, 8)
        assert set(np.unique(dataset["s1"].mask)) <= {0, 2}

    def test_binary_masks_take_the_class(self, tmp_path):
        manifest = _write_samples(tmp_path, [2])
        spec = DatasetSpec("fundus", num_classes=2, image_shape=(4, 4, 1), source=str(manifest), binary_masks=True)
        assert load_dataset(spec)["s0"].mask[0, 0] == 2

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            DatasetSpec("bad", num_classes=0, image_shape=(4, 4, 1))
        with pytest.raises(ConfigError):
            builtin_spec("imagenet")

    def test_mnist(self):
        root = Path(settings.DATA_ROOT) / "mnist"
        if not any(root.glob("train-images-idx3-ubyte*")):
            pytest.skip("MNIST files not present under CVS_DATA_ROOT")
        dataset = load_dataset(builtin_spec("mnist", "train"))
        assert len(dataset) == 60000
        assert dataset[0].image.shape == (28, 28, 1)
        assert set(dataset.labels) == set(range(1, 11))


class TestSamplePerClass:

    def test_m_per_class(self, shapes):
        ids = sample_per_class(shapes, SubsetSpec(2, seed=0))
        assert len(ids) == 6
        assert class_counts([shapes[i] for i in ids], 3) == {1: 2, 2: 2, 3: 2}

    def test_all_is_identity(self, shapes):
        assert sample_per_class(shapes, SubsetSpec(ALL)) == shapes.ids

    def test_deterministic(self, shapes):
        first = sample_per_class(shapes, SubsetSpec(5, seed=7))
        second = sample_per_class(shapes, SubsetSpec(5, seed=7))
        assert first == second
        assert first != sample_per_class(shapes, SubsetSpec(5, seed=8))

    def test_m_exceeds_population(self, shapes):
        with pytest.raises(DatasetValidationError, match="class 1"):
            sample_per_class(shapes, SubsetSpec(11))

    @pytest.mark.parametrize("m", [0, -3, "some"])
    def test_invalid_m(self, m):
        with pytest.raises(ConfigError):
            SubsetSpec.parse(m)
