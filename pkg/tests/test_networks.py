import numpy as np
import pytest
import torch

from cvs.config import settings
from cvs.exceptions import ConfigError, PretrainedWeightsUnavailable, ShapeError
from cvs.networks import (
    ModelGraph,
    ModelParams,
    NetworkConfig,
    build_cvs_head,
    build_linear_head,
    build_model_graph,
    build_multitask_heads,
    build_resnet101,
    build_wide_resnet,
    estimate_flops,
    forward,
    materialize,
    validate_params,
)
from cvs.networks.graph import LayerSpec, NetworkGraph, parameter_count


class TestBackbones:

    def test_wide_resnet_28_10(self):
        backbone = build_wide_resnet(28, 10, input_shape=(32, 32, 3))
        assert backbone.output_shape == (8, 8, 640)
        assert backbone.count("residual_block") == 12

    def test_smallest_wide_resnet(self):
        backbone = build_wide_resnet(10, 1, input_shape=(32, 32, 3))
        assert backbone.count("residual_block") == 3
        assert backbone.output_shape == (8, 8, 64)

    @pytest.mark.parametrize("depth", [27, 4, 11])
    def test_invalid_depth(self, depth):
        with pytest.raises(ConfigError):
            build_wide_resnet(depth, 1)

    def test_wide_resnet_input_must_divide(self):
        with pytest.raises(ShapeError):
            build_wide_resnet(10, 1, input_shape=(30, 30, 3))

    @pytest.mark.parametrize("size,features", [(128, 16), (512, 64)])
    def test_resnet101_output_stride_8(self, size, features):
        backbone = build_resnet101(input_shape=(size, size, 3))
        assert backbone.output_shape == (features, features, 2048)
        assert backbone.count("residual_block") == 3 + 4 + 23 + 3

    def test_pretrained_without_weights(self, monkeypatch, tmp_path):
        monkeypatch.setattr(settings, "RESNET101_WEIGHTS", None)
        with pytest.raises(PretrainedWeightsUnavailable):
            build_resnet101(pretrained=True)
        with pytest.raises(PretrainedWeightsUnavailable):
            build_resnet101(pretrained=True, weights_path=str(tmp_path / "missing.pth"))

    def test_pretrained_only_for_resnet(self):
        with pytest.raises(ConfigError):
            NetworkConfig(backbone="wide-resnet", pretrained=True)


class TestHeads:

    def test_wide_resnet_cvs_head(self):
        backbone = build_wide_resnet(28, 10, input_shape=(32, 32, 3))
        head = build_cvs_head(backbone, 10, (32, 32))
        assert head.output_shape == (32, 32, 11)
        assert [layer.kind for layer in head.layers] == ["batch_norm", "relu", "transposed_conv"]
        projection = head.layer("projection")
        assert projection.params["kernel"] == 4 and projection.params["stride"] == 4

    def test_single_class_head(self):
        backbone = build_wide_resnet(10, 1, input_shape=(32, 32, 3))
        assert build_cvs_head(backbone, 1, (32, 32)).output_shape[-1] == 2

    def test_resnet101_cvs_head(self):
        backbone = build_resnet101(input_shape=(128, 128, 3))
        head = build_cvs_head(backbone, 10, (128, 128))
        assert head.output_shape == (128, 128, 11)
        assert head.layer("aspp").params["rates"] == (12, 24, 36)

    def test_unreachable_target(self):
        backbone = build_wide_resnet(10, 1, input_shape=(32, 32, 3))
        with pytest.raises(ShapeError):
            build_cvs_head(backbone, 10, (64, 64))
        with pytest.raises(ShapeError):
            build_cvs_head(build_resnet101(input_shape=(128, 128, 3)), 10, (256, 256))

    def test_linear_head(self):
        backbone = build_wide_resnet(28, 10, input_shape=(32, 32, 3))
        head = build_linear_head(backbone, 10)
        assert head.output_shape == (10,)
        assert [layer.kind for layer in head.layers] == ["batch_norm", "relu", "avg_pool", "linear"]
        assert parameter_count(head.layer("fc"), (640,)) == 6410
        assert build_linear_head(backbone, 2).output_shape == (2,)

    def test_resnet_linear_head_has_no_norm(self):
        head = build_linear_head(build_resnet101(input_shape=(128, 128, 3)), 10)
        assert [layer.kind for layer in head.layers] == ["avg_pool", "linear"]

    def test_multitask_heads(self):
        heads = build_multitask_heads(build_resnet101(input_shape=(128, 128, 3)), 10, (128, 128))
        assert heads["seg"].output_shape == (128, 128, 11)
        assert heads["clf"].output_shape == (10,)
        assert heads["seg"].count("transposed_conv") == 3

        heads = build_multitask_heads(build_wide_resnet(28, 10, input_shape=(32, 32, 3)), 10, (32, 32))
        assert heads["seg"].output_shape == (32, 32, 11)
        assert heads["clf"].output_shape == (10,)

    @pytest.mark.parametrize("backbone", ["wide-resnet", "resnet101"])
    @pytest.mark.parametrize("method", ["cvs", "segmentation-only", "multitask"])
    @pytest.mark.parametrize("size", [28, 32, 128])
    def test_seg_output_matches_input(self, backbone, method, size):
        channels = 3 if backbone == "resnet101" else 1
        graph = NetworkConfig(backbone=backbone, depth=10, width=1).build(method, (size, size, channels), 7)
        assert graph.heads["seg"].output_shape == (size, size, 8)

    def test_mismatched_head_rejected(self):
        backbone = build_wide_resnet(10, 1, input_shape=(32, 32, 3))
        other = build_wide_resnet(10, 1, input_shape=(64, 64, 3))
        with pytest.raises(ShapeError):
            ModelGraph(backbone, {"seg": build_cvs_head(other, 3, (64, 64))})

    def test_declared_shape_must_agree(self):
        layers = [LayerSpec("pool", "avg_pool")]
        with pytest.raises(ShapeError):
            NetworkGraph("bad", (4, 4, 8), layers, (4,))

    def test_graph_serialization(self, tmp_path):
        graph = build_model_graph("multitask", build_resnet101(input_shape=(128, 128, 3)), 10)
        graph.save(tmp_path / "graph.json")
        assert ModelGraph.load(tmp_path / "graph.json").to_dict() == graph.to_dict()

    def test_flops_grow_with_width(self):
        narrow = build_model_graph("cvs", build_wide_resnet(10, 1), 10)
        wide = build_model_graph("cvs", build_wide_resnet(10, 2), 10)
        assert 0 < estimate_flops(narrow) < estimate_flops(wide)


class TestForward:

    def test_mnist_sized_input(self, tiny_network):
        graph = tiny_network.build("cvs", (28, 28, 1), 10)
        params = ModelParams.from_module(materialize(graph, seed=0))
        logits = forward(graph, params, [np.zeros((28, 28, 1), dtype=np.float32)], head="seg")
        assert tuple(logits.shape) == (1, 11, 28, 28)

    def test_batch_dimension_preserved(self, tiny_network, rng):
        graph = tiny_network.build("multitask", (32, 32, 3), 5)
        params = ModelParams.from_module(materialize(graph, seed=0))
        images = rng.uniform(0, 1, size=(8, 32, 32, 3)).astype(np.float32)
        outputs = forward(graph, params, list(images))
        assert tuple(outputs["seg"].shape) == (8, 6, 32, 32)
        assert tuple(outputs["clf"].shape) == (8, 5)

    def test_zero_projection_gives_zero_logits(self, tiny_network, rng):
        graph = tiny_network.build("cvs", (32, 32, 3), 4)
        net = materialize(graph, seed=0)
        with torch.no_grad():
            net.heads["seg"].layers["projection"].weight.zero_()
            net.heads["seg"].layers["projection"].bias.zero_()
        images = list(rng.uniform(0, 1, size=(2, 32, 32, 3)).astype(np.float32))
        logits = forward(graph, ModelParams.from_module(net), images, head="seg")
        assert torch.count_nonzero(logits) == 0

    def test_wrong_input_names_first_layer(self, tiny_network):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=0))
        with pytest.raises(ShapeError, match="conv1"):
            forward(graph, params, [np.zeros((28, 28, 3), dtype=np.float32)])

    def test_validate_params_names_layer(self, tiny_network):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=0))
        validate_params(graph, params)
        key = "heads.seg.layers.projection.weight"
        broken = ModelParams(dict(params.tensors))
        broken.tensors[key] = torch.zeros(1)
        with pytest.raises(ShapeError, match="heads.seg.layers.projection"):
            validate_params(graph, broken)
        del broken.tensors[key]
        with pytest.raises(ShapeError, match="missing"):
            validate_params(graph, broken)

    def test_fresh_init_is_seeded(self, tiny_network):
        graph = tiny_network.build("classification", (32, 32, 3), 3)
        a = materialize(graph, seed=5).state_dict()
        b = materialize(graph, seed=5).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_params_round_trip(self, tmp_path, tiny_network):
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=0), epoch=4, config_hash="abc")
        params.save(tmp_path / "params.pt")
        loaded = ModelParams.load(tmp_path / "params.pt")
        assert loaded.epoch == 4 and loaded.config_hash == "abc"
        assert all(torch.equal(loaded.tensors[k], params.tensors[k]) for k in params.tensors)

    def test_module_cache_hashes_graph_once(self, monkeypatch, tiny_network):
        calls = []

        def counting_hash(document):
            calls.append(document["method"])
            return "fixed"

        monkeypatch.setattr("cvs.networks.graph.config_hash", counting_hash)
        graph = tiny_network.build("cvs", (32, 32, 3), 3)
        params = ModelParams.from_module(materialize(graph, seed=0))
        first = params.module_for(graph)
        for _ in range(5):
            assert params.module_for(graph) is first
        assert calls == ["cvs"]
        assert graph.fingerprint == "fixed"

    def test_fingerprint_tracks_content(self, tiny_network):
        a = tiny_network.build("cvs", (32, 32, 3), 3)
        b = ModelGraph.from_dict(a.to_dict())
        assert a.fingerprint == b.fingerprint
        assert a.fingerprint != tiny_network.build("cvs", (32, 32, 3), 4).fingerprint

    @pytest.mark.slow
    def test_resnet101_forward(self):
        graph = NetworkConfig(backbone="resnet101").build("cvs", (128, 128, 3), 10)
        params = ModelParams.from_module(materialize(graph, seed=0))
        logits = forward(graph, params, [np.zeros((128, 128, 3), dtype=np.float32)] * 2, head="seg")
        assert tuple(logits.shape) == (2, 11, 128, 128)
