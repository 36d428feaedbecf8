import numpy as np
import pytest

from cvs.augmentation import AugmentationPolicy, TransformSpec, augment, augment_mask, default_policy
from cvs.datasets import LabeledSample
from cvs.exceptions import ConfigError


def _sample(rng, size=16, channels=3, label=2):
    image = rng.uniform(0, 1, size=(size, size, channels)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[4:10, 3:9] = label
    return LabeledSample("x", image, label, mask)


def _policy(*items):
    return AugmentationPolicy.from_config(list(items))


class TestAugment:

    def test_empty_policy_is_identity(self, rng):
        sample = _sample(rng)
        assert augment(sample, AugmentationPolicy(()), seed=3) is sample

    def test_horizontal_flip(self, rng):
        sample = _sample(rng)
        out = augment(sample, _policy({"kind": "horizontal_flip", "prob": 1.0}), seed=0)
        np.testing.assert_array_equal(out.image, sample.image[:, ::-1])
        np.testing.assert_array_equal(out.mask, sample.mask[:, ::-1])
        assert out.label == sample.label

    @pytest.mark.parametrize("quarter_turns", [1, 2, 3])
    def test_exact_rotation_moves_pixel(self, quarter_turns):
        size = 7
        r, c = 1, 5
        mask = np.zeros((size, size), dtype=np.int64)
        mask[r, c] = 3
        out = augment_mask(mask, _policy({"kind": "rotate", "exact90": quarter_turns}), seed=0)

        # counter-clockwise quarter turn maps (r, c) to (size - 1 - c, r)
        expected_r, expected_c = r, c
        for _ in range(quarter_turns):
            expected_r, expected_c = size - 1 - expected_c, expected_r
        assert list(zip(*np.nonzero(out))) == [(expected_r, expected_c)]
        assert out[expected_r, expected_c] == 3

    @pytest.mark.parametrize("kind", [
        {"kind": "rotate", "max_degrees": 30.0},
        {"kind": "shift_zoom", "max_shift_frac": 0.2, "zoom_range": [0.8, 1.2]},
        {"kind": "crop_resize", "scale_range": [0.5, 1.0]},
    ])
    def test_geometric_masks_keep_class_ids(self, rng, kind):
        sample = _sample(rng, label=2)
        out = augment(sample, _policy(kind), seed=11)
        assert out.mask.dtype == np.int64
        assert set(np.unique(out.mask)) <= {0, 2}
        assert out.image.shape == sample.image.shape

    def test_photometric_leaves_mask(self, rng):
        sample = _sample(rng)
        policy = _policy({"kind": "gaussian_noise", "sigma": 0.5}, {"kind": "color_distort", "strength": 1.0})
        out = augment(sample, policy, seed=5)
        np.testing.assert_array_equal(out.mask, sample.mask)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert not np.allclose(out.image, sample.image)

    def test_same_seed_same_result(self, rng):
        sample = _sample(rng)
        policy = default_policy("cifar10", "cvs")
        a, b = augment(sample, policy, seed=42), augment(sample, policy, seed=42)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_mask_only_path_matches_paired_path(self, rng):
        sample = _sample(rng, channels=3)
        policy = default_policy("cifar100", "cvs")
        paired = augment(sample, policy, seed=9)
        alone = augment_mask(sample.mask, policy, seed=9, channels=3)
        np.testing.assert_array_equal(paired.mask, alone)


class TestPolicies:

    def test_out_of_range_parameter(self):
        with pytest.raises(ConfigError):
            TransformSpec("rotate", {"max_degrees": 200.0})
        with pytest.raises(ConfigError):
            TransformSpec("horizontal_flip", {"prob": 1.5})

    def test_unknown_kind_or_parameter(self):
        with pytest.raises(ConfigError):
            TransformSpec("mixup")
        with pytest.raises(ConfigError):
            TransformSpec("rotate", {"angle": 3})
        with pytest.raises(ConfigError):
            AugmentationPolicy.from_config([{"sigma": 0.1}])

    def test_defaults_by_method(self):
        cvs = [t.kind for t in default_policy("mnist", "cvs").transforms]
        baseline = [t.kind for t in default_policy("mnist", "classification").transforms]
        fundus = [t.kind for t in default_policy("hrf", "multitask", fundus=True).transforms]
        assert cvs == ["rotate", "shift_zoom", "gaussian_noise"]
        assert baseline == ["crop_resize", "horizontal_flip"]
        assert fundus == ["horizontal_flip", "rotate"]

    def test_config_round_trip(self):
        policy = default_policy("cifar10", "cvs")
        assert AugmentationPolicy.from_config(policy.to_config()) == policy
