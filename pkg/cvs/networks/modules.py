"""
Materialize layer graphs into torch modules and run them
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from ..exceptions import PretrainedWeightsUnavailable, ShapeError
from .graph import LayerSpec, ModelGraph, NetworkGraph, Shape


class WideBasicBlock(nn.Module):
    """Pre-activation wide residual block with dropout between the two convs."""

    def __init__(self, in_planes: int, planes: int, stride: int = 1, dropout: float = 0.0):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, kernel_size=3, padding=1, bias=True)
        self.dropout = nn.Dropout(p=dropout)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, kernel_size=3, stride=stride, padding=1, bias=True)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=True),
            )

    def forward(self, x):
        out = self.dropout(self.conv1(F.relu(self.bn1(x))))
        out = self.conv2(F.relu(self.bn2(out)))
        return out + self.shortcut(x)


class Bottleneck(nn.Module):
    """ResNet bottleneck with optional dilation in the 3x3 conv."""

    def __init__(self, in_planes: int, mid_planes: int, out_planes: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, mid_planes, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_planes)
        self.conv2 = nn.Conv2d(
            mid_planes, mid_planes, kernel_size=3, stride=stride,
            padding=dilation, dilation=dilation, bias=False,
        )
        self.bn2 = nn.BatchNorm2d(mid_planes)
        self.conv3 = nn.Conv2d(mid_planes, out_planes, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_planes)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_planes != out_planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class AtrousPyramid(nn.Module):
    """Parallel 1x1, dilated 3x3 and image-pooling branches fused by a 1x1 projection."""

    def __init__(self, in_channels: int, channels: int, rates):
        super().__init__()
        branches = [nn.Sequential(
            nn.Conv2d(in_channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )]
        for rate in rates:
            branches.append(nn.Sequential(
                nn.Conv2d(in_channels, channels, 3, padding=rate, dilation=rate, bias=False),
                nn.BatchNorm2d(channels),
                nn.ReLU(inplace=True),
            ))
        self.branches = nn.ModuleList(branches)
        self.pooling = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(channels * (len(rates) + 2), channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
        )

    def forward(self, x):
        size = x.shape[-2:]
        outs = [branch(x) for branch in self.branches]
        pooled = self.pooling(x)
        outs.append(F.interpolate(pooled, size=size, mode="bilinear", align_corners=False))
        return self.project(torch.cat(outs, dim=1))


class Resize(nn.Module):
    """Bilinear resize to a fixed size or by an integer factor."""

    def __init__(self, size=None, factor=None):
        super().__init__()
        self.size = tuple(size) if size is not None else None
        self.factor = factor

    def forward(self, x):
        if self.size is not None:
            return F.interpolate(x, size=self.size, mode="bilinear", align_corners=False)
        return F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)


def build_layer(layer: LayerSpec, in_shape: Shape) -> nn.Module:
    """Create the torch module for one descriptor given its input shape."""
    p = layer.params
    kind = layer.kind
    c_in = in_shape[-1]
    if kind == "conv":
        return nn.Conv2d(
            c_in, p["channels"], kernel_size=p["kernel"], stride=p["stride"],
            padding=p["padding"], dilation=p["dilation"], bias=p["bias"],
        )
    if kind == "transposed_conv":
        return nn.ConvTranspose2d(
            c_in, p["channels"], kernel_size=p["kernel"], stride=p["stride"], padding=p["padding"],
        )
    if kind == "batch_norm":
        return nn.BatchNorm2d(c_in) if len(in_shape) == 3 else nn.BatchNorm1d(c_in)
    if kind == "relu":
        return nn.ReLU()
    if kind == "dropout":
        return nn.Dropout(p=p.get("rate", 0.5))
    if kind == "avg_pool":
        return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
    if kind == "max_pool":
        return nn.MaxPool2d(kernel_size=p["kernel"], stride=p["stride"], padding=p["padding"])
    if kind == "linear":
        return nn.Linear(c_in, p["out_features"])
    if kind == "residual_block":
        if p["style"] == "wide_basic":
            return WideBasicBlock(c_in, p["out_channels"], p["stride"], p.get("dropout", 0.0))
        return Bottleneck(c_in, p["mid_channels"], p["out_channels"], p["stride"], p.get("dilation", 1))
    if kind == "upsample":
        return Resize(size=p.get("size"), factor=p.get("factor"))
    if kind == "atrous_pyramid":
        return AtrousPyramid(c_in, p["channels"], p["rates"])
    raise ShapeError(f"Cannot materialize layer {layer.name} of kind {kind}")


def initialize_weights(module: nn.Module):
    """Fan-in scaled normal for convs, unit/zero batch norm, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.zeros_(m.bias)


class GraphModule(nn.Module):
    """Runs the layers of one ``NetworkGraph`` in order."""

    def __init__(self, graph: NetworkGraph):
        super().__init__()
        self.graph = graph
        self.layers = nn.ModuleDict()
        for layer, in_shape, _ in graph.layer_shapes():
            self.layers[layer.name] = build_layer(layer, in_shape)

    def forward(self, x):
        for name, layer in self.layers.items():
            try:
                x = layer(x)
            except RuntimeError as e:
                raise ShapeError(f"Layer {name} failed on input {tuple(x.shape)}: {e}") from e
        return x


class CvsNet(nn.Module):
    """Backbone plus named heads; ``forward`` returns a dict of head outputs."""

    def __init__(self, graph: ModelGraph):
        super().__init__()
        self.graph = graph
        self.backbone = GraphModule(graph.backbone)
        self.heads = nn.ModuleDict({name: GraphModule(head) for name, head in graph.heads.items()})

    def forward(self, x) -> Dict[str, torch.Tensor]:
        features = self.backbone(x)
        return {name: head(features) for name, head in self.heads.items()}


_TORCHVISION_BLOCK = re.compile(r"^(layer\d)_(\d+)\.")


def _torchvision_key(key: str) -> Optional[str]:
    """Map a backbone state-dict key onto the torchvision ResNet layout."""
    if not key.startswith("layers."):
        return None
    key = key[len("layers."):]
    return _TORCHVISION_BLOCK.sub(r"\1.\2.", key)


def load_pretrained_backbone(backbone: GraphModule, weights_path: Union[str, Path, None]):
    """
    Copy torchvision-format ResNet weights into a materialized backbone

    Args:
        backbone: Materialized ResNet-101 backbone
        weights_path: Local state-dict file

    Raises:
        PretrainedWeightsUnavailable: If the file is missing or incompatible
    """
    if not weights_path or not Path(weights_path).is_file():
        raise PretrainedWeightsUnavailable(
            f"Pretrained ResNet-101 weights not found at {weights_path!r}; set CVS_RESNET101_WEIGHTS"
        )
    source = torch.load(weights_path, map_location="cpu")
    if isinstance(source, dict) and "state_dict" in source:
        source = source["state_dict"]
    target = backbone.state_dict()
    loaded = 0
    for key, tensor in target.items():
        tv_key = _torchvision_key(key)
        if tv_key not in source:
            continue
        if source[tv_key].shape != tensor.shape:
            raise PretrainedWeightsUnavailable(
                f"Pretrained tensor {tv_key} has shape {tuple(source[tv_key].shape)}, expected {tuple(tensor.shape)}"
            )
        target[key] = source[tv_key]
        loaded += 1
    if loaded == 0:
        raise PretrainedWeightsUnavailable(f"No compatible tensors in {weights_path}")
    backbone.load_state_dict(target)
    logger.info(f"Loaded {loaded}/{len(target)} pretrained tensors from {weights_path}")


def materialize(graph: ModelGraph, seed: Optional[int] = None) -> CvsNet:
    """
    Instantiate a model from its graph with fresh weights

    Args:
        graph: Model graph (backbone plus heads)
        seed: Optional seed for reproducible initialization

    Returns:
        Initialized ``CvsNet``; a pretrained backbone is loaded when the graph asks for one
    """
    if seed is not None:
        torch.manual_seed(seed)
    net = CvsNet(graph)
    initialize_weights(net)
    if graph.backbone.meta.get("pretrained"):
        load_pretrained_backbone(net.backbone, graph.backbone.meta.get("weights_path"))
    return net


@dataclass
class ModelParams:
    """Trained tensors of a model keyed by state-dict name."""
    tensors: Dict[str, torch.Tensor]
    epoch: int = 0
    config_hash: str = ""
    _modules: Dict[str, CvsNet] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_module(cls, module: nn.Module, epoch: int = 0, config_hash: str = "") -> "ModelParams":
        tensors = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
        return cls(tensors=tensors, epoch=epoch, config_hash=config_hash)

    def save(self, path: Union[str, Path]):
        torch.save({"tensors": self.tensors, "epoch": self.epoch, "config_hash": self.config_hash}, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelParams":
        data = torch.load(path, map_location="cpu")
        return cls(tensors=data["tensors"], epoch=data.get("epoch", 0), config_hash=data.get("config_hash", ""))

    def module_for(self, graph: ModelGraph, device: Union[str, torch.device] = "cpu") -> CvsNet:
        """Materialized module carrying these tensors, cached per graph."""
        key = f"{graph.fingerprint}@{device}"
        if key not in self._modules:
            net = CvsNet(graph)
            load_params(net, self)
            net.to(device).eval()
            self._modules[key] = net
        return self._modules[key]


def _layer_of(key: str) -> str:
    parts = key.split(".")
    # heads.<head>.layers.<name> or backbone.layers.<name>
    return ".".join(parts[:4]) if parts[0] == "heads" else ".".join(parts[:3])


def validate_params(graph: ModelGraph, params: ModelParams):
    """
    Check that parameter tensors match the graph exactly

    Raises:
        ShapeError: Naming the first layer with a missing, extra or misshapen tensor
    """
    with torch.device("meta"):
        expected = CvsNet(graph).state_dict()
    for key, tensor in expected.items():
        if key not in params.tensors:
            raise ShapeError(f"Layer {_layer_of(key)}: missing tensor {key}")
        if tuple(params.tensors[key].shape) != tuple(tensor.shape):
            raise ShapeError(
                f"Layer {_layer_of(key)}: tensor {key} has shape {tuple(params.tensors[key].shape)}, "
                f"expected {tuple(tensor.shape)}"
            )
    for key in params.tensors:
        if key not in expected:
            raise ShapeError(f"Layer {_layer_of(key)}: unexpected tensor {key}")


def load_params(net: CvsNet, params: ModelParams):
    validate_params(net.graph, params)
    net.load_state_dict(params.tensors)


def images_to_tensor(images) -> torch.Tensor:
    """Stack H x W x C images (list or N x H x W x C array) into an N x C x H x W float tensor."""
    if isinstance(images, torch.Tensor):
        return images.float()
    batch = np.stack([np.asarray(img, dtype=np.float32) for img in images])
    if batch.ndim == 3:
        batch = batch[..., None]
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def forward(graph: ModelGraph, params: ModelParams, image_batch, head: Optional[str] = None,
            device: Union[str, torch.device] = "cpu"):
    """
    Run a model in inference mode

    Args:
        graph: Model graph
        params: Trained tensors
        image_batch: N x C x H x W tensor, or a sequence of H x W x C images
        head: Head to return; all heads when omitted
        device: Torch device

    Returns:
        Output tensor of ``head`` or a dict of all head outputs

    Raises:
        ShapeError: If the batch does not match the declared input shape
    """
    x = images_to_tensor(image_batch)
    height, width, channels = graph.input_shape
    if tuple(x.shape[1:]) != (channels, height, width):
        first = graph.backbone.layers[0].name
        raise ShapeError(
            f"Layer {first}: input batch {tuple(x.shape[1:])} does not match declared "
            f"{(channels, height, width)} (C x H x W)"
        )
    net = params.module_for(graph, device)
    with torch.inference_mode():
        outputs = net(x.to(device))
    outputs = {name: out.cpu() for name, out in outputs.items()}
    return outputs if head is None else outputs[head]
