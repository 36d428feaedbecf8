import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from cvs.datasets import ALL, SubsetSpec, generate_synthetic_shapes, take_per_class
from cvs.exceptions import (
    ConfigError,
    DatasetValidationError,
    MissingLabelsError,
    ShapeError,
    TrainingDivergedError,
)
from cvs.networks import materialize
from cvs.training import (
    Checkpoint,
    TrainConfig,
    class_cross_entropy,
    estimate_steps,
    make_optimizer,
    multitask_loss,
    pixel_cross_entropy,
    read_metric_log,
    resolve_batch_size,
    resolve_epochs,
    train,
    validation_split,
)


def _pixel_oracle(logits, target):
    channels, height, width = logits.shape
    total = 0.0
    for row in range(height):
        for col in range(width):
            column = logits[:, row, col]
            top = max(column)
            log_norm = top + math.log(sum(math.exp(v - top) for v in column))
            total += log_norm - column[target[row, col]]
    return total / (height * width)


class TestLosses:

    @pytest.mark.parametrize("num_classes", [1, 2, 10])
    def test_uniform_logits(self, num_classes):
        logits = torch.zeros(num_classes + 1, 5, 5, dtype=torch.float64)
        target = torch.randint(0, num_classes + 1, (5, 5))
        assert pixel_cross_entropy(logits, target).item() == pytest.approx(math.log(num_classes + 1), abs=1e-6)

    def test_saturated_prediction(self):
        target = torch.tensor([[0, 3], [10, 1]])
        logits = torch.zeros(11, 2, 2, dtype=torch.float64)
        logits.scatter_(0, target.unsqueeze(0), 30.0)
        assert pixel_cross_entropy(logits, target).item() < 1e-9

    def test_matches_per_pixel_oracle(self, rng):
        logits = rng.normal(size=(3, 2, 2))
        target = rng.integers(0, 3, size=(2, 2))
        loss = pixel_cross_entropy(torch.from_numpy(logits), torch.from_numpy(target))
        assert loss.item() == pytest.approx(_pixel_oracle(logits, target), abs=1e-6)

    def test_spatial_permutation_invariance(self, rng):
        logits = torch.from_numpy(rng.normal(size=(4, 3, 5)))
        target = torch.from_numpy(rng.integers(0, 4, size=(3, 5)))
        perm = torch.from_numpy(rng.permutation(15))
        shuffled_logits = logits.reshape(4, 15)[:, perm].reshape(4, 3, 5)
        shuffled_target = target.reshape(15)[perm].reshape(3, 5)
        assert pixel_cross_entropy(shuffled_logits, shuffled_target).item() == pytest.approx(
            pixel_cross_entropy(logits, target).item(), abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(DatasetValidationError):
            pixel_cross_entropy(torch.zeros(3, 2, 2), torch.full((2, 2), 3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pixel_cross_entropy(torch.zeros(3, 2, 2), torch.zeros(4, 4, dtype=torch.long))

    def test_class_cross_entropy(self):
        assert class_cross_entropy(torch.zeros(10, dtype=torch.float64), 4).item() == pytest.approx(math.log(10))
        assert class_cross_entropy(torch.tensor([1.0, 3.0], dtype=torch.float64), 2).item() == pytest.approx(
            0.1269, abs=1e-4)
        favored = torch.zeros(10, dtype=torch.float64)
        favored[6] = 30.0
        assert class_cross_entropy(favored, 7).item() < 1e-9
        with pytest.raises(DatasetValidationError):
            class_cross_entropy(torch.zeros(3), 0)

    def test_gradients_match_finite_differences(self, rng):
        logits = torch.from_numpy(rng.normal(size=(4, 3, 3))).requires_grad_()
        target = torch.from_numpy(rng.integers(0, 4, size=(3, 3)))
        assert torch.autograd.gradcheck(lambda x: pixel_cross_entropy(x, target), (logits,), eps=1e-6, rtol=1e-3)

        scores = torch.from_numpy(rng.normal(size=(5, 6))).requires_grad_()
        labels = torch.from_numpy(rng.integers(1, 7, size=5))
        assert torch.autograd.gradcheck(lambda x: class_cross_entropy(x, labels), (scores,), eps=1e-6, rtol=1e-3)

    def test_gradients_through_small_network(self, rng):
        torch.manual_seed(0)
        net = torch.nn.Sequential(torch.nn.Conv2d(2, 4, 3, padding=1), torch.nn.ReLU(), torch.nn.Conv2d(4, 3, 1))
        net = net.double()
        assert sum(p.numel() for p in net.parameters()) <= 1000
        x = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
        target = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4)))
        weight = net[0].weight

        def loss_of(w):
            out = torch.nn.functional.conv2d(x, w, net[0].bias, padding=1)
            return pixel_cross_entropy(net[2](torch.relu(out)), target)

        assert torch.autograd.gradcheck(loss_of, (weight.detach().clone().requires_grad_(),), eps=1e-6, rtol=1e-3)

    def test_multitask_loss(self):
        assert multitask_loss(2.0, 0.5, 1.0) == 2.5
        assert multitask_loss(2.0, 0.5, 0.0) == 2.0
        assert multitask_loss(1.0, 3.0, 2.0) - multitask_loss(1.0, 1.0, 2.0) == pytest.approx(4.0)
        with pytest.raises(ConfigError):
            multitask_loss(1.0, 1.0, -0.5)


class TestSchedule:

    def test_epochs(self):
        assert resolve_epochs(5) == 600
        assert resolve_epochs(100) == 600
        assert resolve_epochs(500) == 200
        assert resolve_epochs(ALL) == 200
        assert resolve_epochs(5, epochs=3) == 3

    @pytest.mark.parametrize("n,size", [(30, 8), (50, 8), (100, 16), (1000, 32), (50000, 128)])
    def test_batch_size_ladder(self, n, size):
        assert resolve_batch_size(n) == size

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=12)
        with pytest.raises(ConfigError):
            TrainConfig(method="distillation")
        with pytest.raises(ConfigError):
            TrainConfig(lr_schedule="step")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_validation_split(self, shapes):
        train_part, val = validation_split(list(shapes), 5, 3, seed=0)
        assert val == [] and len(train_part) == 30
        train_part, val = validation_split(list(shapes), ALL, 3, seed=0)
        assert val == [] and len(train_part) == 30

        pool = generate_synthetic_shapes(60, seed=5, prefix="pool")
        train_part, val = validation_split(pool, ALL, 3, seed=0)
        assert len(val) == 6 and len(train_part) == 54
        assert {s.id for s in val}.isdisjoint(s.id for s in train_part)
        train_part, val = validation_split(pool[:51], 17, 3, seed=0)
        assert len(val) == 5 and len(train_part) == 46

    def test_small_pool_with_all_keeps_every_image(self):
        pool = generate_synthetic_shapes(36, seed=2, prefix="fold")
        train_part, val = validation_split(pool, ALL, 3, seed=0)
        assert len(train_part) == 36 and val == []

    def test_estimate_steps(self):
        config = TrainConfig(epochs=2, batch_size=8)
        assert estimate_steps(30, config) == 8
        assert estimate_steps(17, config) == 4

    def test_sgd_momentum_update(self):
        weight = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        optimizer = make_optimizer([weight], TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
        x = torch.tensor([3.0, 0.5], dtype=torch.float64)
        expected, velocity = weight.detach().clone(), torch.zeros(2, dtype=torch.float64)
        for _ in range(3):
            optimizer.zero_grad()
            (weight * x).sum().backward()
            optimizer.step()
            velocity = 0.9 * velocity + x
            expected = expected - 0.1 * velocity
        torch.testing.assert_close(weight.detach(), expected)


class TestTrain:

    def test_missing_masks_fail_before_training(self, tiny_network, quick_train, shapes):
        samples = [replace(s, mask=None) for s in list(shapes)[:4]]
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        with pytest.raises(MissingLabelsError) as excinfo:
            train(graph, samples, quick_train)
        assert excinfo.value.sample_ids == [s.id for s in samples]

    def test_classification_needs_no_masks(self, tiny_network, quick_train, shapes):
        samples = [replace(s, mask=None) for s in list(shapes)[:9]]
        graph = tiny_network.build("classification", (32, 32, 3), 3)
        result = train(graph, samples, replace(quick_train, method="classification"))
        assert len(result.values("train", "loss")) == 1

    def test_zero_learning_rate_keeps_weights(self, tiny_network, shapes):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        config = TrainConfig(method="cvs", epochs=2, batch_size=8, lr=0.0, seed=3)
        result = train(graph, list(shapes)[:12], config)
        initial = materialize(graph, seed=3).state_dict()
        for key, tensor in result.params.tensors.items():
            if "running" in key or "num_batches" in key:
                continue
            assert torch.equal(tensor, initial[key]), key

    def test_same_seed_same_losses(self, tiny_network, shapes):
        graph = tiny_network.build("multitask", (32, 32, 3), 3)
        config = TrainConfig(method="multitask", epochs=2, batch_size=8, lr=0.05, seed=11)
        first = train(graph, list(shapes), config).values("train", "loss")
        second = train(graph, list(shapes), config).values("train", "loss")
        assert first == second

    def test_non_finite_loss_aborts(self, tiny_network, quick_train, shapes):
        samples = list(shapes)[:8]
        samples[0] = replace(samples[0], image=np.full((32, 32, 3), np.nan, dtype=np.float32))
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train(graph, samples, replace(quick_train, batch_size=8))

    def test_checkpoint_and_metric_log(self, tmp_path, tiny_network, shapes):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        config = TrainConfig(method="cvs", epochs=2, batch_size=8, lr=0.05, seed=0)
        result = train(graph, list(shapes)[:24], config, validation=list(shapes)[24:],
                       output_dir=tmp_path, config_hash="feed")
        records = read_metric_log(tmp_path / "metrics.tsv")
        assert [(r.epoch, r.split, r.metric) for r in records] == [
            (1, "train", "loss"), (1, "val", "accuracy"), (2, "train", "loss"), (2, "val", "accuracy"),
        ]
        assert all(0.0 <= r.value <= 1.0 for r in records if r.metric == "accuracy")

        checkpoint = Checkpoint.load(tmp_path / "checkpoint")
        assert checkpoint.epoch == 2
        assert checkpoint.config_hash == "feed"
        assert checkpoint.graph.to_dict() == graph.to_dict()
        assert all(torch.equal(checkpoint.params.tensors[k], result.params.tensors[k]) for k in result.params.tensors)

    def test_resume_continues_the_same_run(self, tmp_path, tiny_network, shapes):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        samples = list(shapes)[:16]
        config = TrainConfig(method="cvs", epochs=3, batch_size=8, lr=0.05, lr_schedule="constant", seed=4)
        straight = train(graph, samples, config).values("train", "loss")

        train(graph, samples, replace(config, epochs=2), output_dir=tmp_path)
        resumed = train(graph, samples, config, resume_from=tmp_path / "checkpoint")
        losses = resumed.values("train", "loss")
        assert len(losses) == 3
        assert losses == pytest.approx(straight, rel=1e-5)

    @pytest.mark.slow
    def test_cvs_loss_halves_on_shapes(self, tiny_network, shapes):
        subset = list(take_per_class(shapes, SubsetSpec(5, seed=0)))
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        config = TrainConfig(method="cvs", epochs=30, batch_size=8, lr=0.05, seed=0)
        losses = train(graph, subset, config).values("train", "loss")
        assert losses[-1] <= 0.5 * losses[0]
