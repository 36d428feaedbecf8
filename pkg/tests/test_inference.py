import math

import numpy as np
import pytest
import torch

from cvs.exceptions import ConfigError, NonFiniteError, ShapeError
from cvs.inference import class_scores_from_seg, predict_batch, predict_labels, predict_masks
from cvs.networks import ModelParams, forward, materialize


def _oracle(h):
    """Per-pixel loop: average each class channel, then softmax."""
    channels, height, width = h.shape
    logits = []
    for c in range(1, channels):
        total = 0.0
        for row in range(height):
            for col in range(width):
                total += float(h[c, row, col])
        logits.append(total / (height * width))
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    probabilities = [e / sum(exps) for e in exps]
    predicted = probabilities.index(max(probabilities)) + 1
    return logits, probabilities, predicted


class TestClassScores:

    def test_single_pixel(self):
        h = np.array([0.0, 1.0, 3.0]).reshape(3, 1, 1)
        scores = class_scores_from_seg(h)
        np.testing.assert_allclose(scores.logits, [1.0, 3.0])
        np.testing.assert_allclose(scores.probabilities, [0.1192, 0.8808], atol=1e-4)
        assert scores.predicted == 2

    def test_constant_channels_tie_to_first_class(self):
        scores = class_scores_from_seg(np.full((6, 4, 4), 2.5))
        np.testing.assert_allclose(scores.probabilities, np.full(5, 0.2))
        assert scores.predicted == 1

    def test_spatial_average(self):
        h = np.zeros((3, 2, 2))
        h[1] = 1.0
        h[2] = np.array([[4.0, 4.0], [0.0, 0.0]])
        scores = class_scores_from_seg(h)
        np.testing.assert_allclose(scores.logits, [1.0, 2.0])
        assert scores.predicted == 2

    def test_background_channel_is_ignored(self):
        h = np.zeros((3, 2, 2))
        h[0] = 100.0
        h[1] = 1.0
        assert class_scores_from_seg(h).predicted == 1

    def test_matches_per_pixel_oracle(self, rng):
        for _ in range(100):
            channels = int(rng.integers(2, 14))
            height, width = rng.integers(1, 9, size=2)
            h = rng.normal(0, 3, size=(channels, height, width))
            logits, probabilities, predicted = _oracle(h)
            scores = class_scores_from_seg(h)
            assert np.max(np.abs(scores.probabilities - probabilities)) < 1e-6
            np.testing.assert_allclose(scores.logits, logits, atol=1e-9)
            assert scores.predicted == predicted

    def test_probabilities_sum_to_one(self, rng):
        scores = class_scores_from_seg(rng.normal(size=(11, 8, 8)))
        assert scores.probabilities.sum() == pytest.approx(1.0)
        assert scores.num_classes == 10

    def test_constant_shift_leaves_scores_unchanged(self, rng):
        for _ in range(50):
            h = rng.normal(0, 2, size=(int(rng.integers(2, 9)), 5, 6))
            c = float(rng.uniform(-50, 50))
            base, shifted = class_scores_from_seg(h), class_scores_from_seg(h + c)
            np.testing.assert_allclose(shifted.probabilities, base.probabilities, atol=1e-9)
            np.testing.assert_allclose(shifted.logits, base.logits + c, atol=1e-9)
            assert shifted.predicted == base.predicted

    def test_foreground_permutation_permutes_probabilities(self, rng):
        for _ in range(50):
            classes = int(rng.integers(2, 9))
            h = rng.normal(0, 2, size=(classes + 1, 4, 4))
            perm = rng.permutation(classes)
            permuted = h.copy()
            permuted[1:] = h[1:][perm]
            base, moved = class_scores_from_seg(h), class_scores_from_seg(permuted)
            np.testing.assert_allclose(moved.probabilities, base.probabilities[perm], atol=1e-12)
            assert perm[moved.predicted - 1] + 1 == base.predicted

    def test_pixel_order_does_not_matter(self, rng):
        for _ in range(50):
            h = rng.normal(0, 2, size=(4, 6, 5))
            order = rng.permutation(30)
            shuffled = h.reshape(4, -1)[:, order].reshape(4, 6, 5)
            base, moved = class_scores_from_seg(h), class_scores_from_seg(shuffled)
            np.testing.assert_allclose(moved.probabilities, base.probabilities, atol=1e-12)
            assert moved.predicted == base.predicted

    def test_non_finite(self):
        h = np.zeros((3, 2, 2))
        h[1, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            class_scores_from_seg(h)
        h[1, 0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            class_scores_from_seg(h)
        with pytest.raises(RuntimeError) as excinfo:
            class_scores_from_seg(h)
        assert not isinstance(excinfo.value, ValueError)

    def test_no_foreground_channel(self):
        with pytest.raises(ShapeError):
            class_scores_from_seg(np.zeros((1, 2, 2)))
        with pytest.raises(ShapeError):
            class_scores_from_seg(np.zeros((2, 2)))


class TestPredict:

    def test_seg_predictions_match_oracle(self, tiny_network, rng):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=1))
        images = list(rng.uniform(0, 1, size=(3, 32, 32, 3)).astype(np.float32))

        predicted = predict_labels(graph, params, images, batch_size=2)
        logits = forward(graph, params, images, head="seg").numpy()
        assert predicted.tolist() == [_oracle(h)[2] for h in logits]
        assert [s.predicted for s in predict_batch(graph, params, images)] == predicted.tolist()

    def test_batch_of_one_matches_single_path(self, tiny_network, rng):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=3))
        images = list(rng.uniform(0, 1, size=(4, 32, 32, 3)).astype(np.float32))
        batched = predict_batch(graph, params, images)
        for image, together in zip(images, batched):
            (alone,) = predict_batch(graph, params, [image])
            direct = class_scores_from_seg(forward(graph, params, [image], head="seg")[0])
            np.testing.assert_array_equal(alone.probabilities, direct.probabilities)
            assert alone.predicted == direct.predicted
            np.testing.assert_allclose(together.probabilities, alone.probabilities, atol=1e-5)

    def test_clf_head_used_when_present(self, tiny_network, rng):
        graph = tiny_network.build("multitask", (32, 32, 3), 4)
        params = ModelParams.from_module(materialize(graph, seed=2))
        images = list(rng.uniform(0, 1, size=(5, 32, 32, 3)).astype(np.float32))
        scores = forward(graph, params, images, head="clf")
        expected = (torch.argmax(scores, dim=1) + 1).tolist()
        assert predict_labels(graph, params, images).tolist() == expected

    def test_masks_need_seg_head(self, tiny_network):
        graph = tiny_network.build("classification", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=0))
        with pytest.raises(ConfigError):
            predict_masks(graph, params, [np.zeros((32, 32, 3), dtype=np.float32)])
        with pytest.raises(ConfigError):
            predict_batch(graph, params, [np.zeros((32, 32, 3), dtype=np.float32)])
