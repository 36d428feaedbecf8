"""
Declarative layer graphs

A ``NetworkGraph`` is an ordered list of layer descriptors plus declared
input and output shapes. Shapes are written ``(H, W, C)`` for feature maps
and ``(F,)`` for vectors. Shape inference runs over the descriptor chain
and must agree with the declared output shape.
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from ..exceptions import ConfigError, ShapeError
from ..utils.helpers import config_hash

Shape = Tuple[int, ...]

LAYER_KINDS = {
    "conv",
    "batch_norm",
    "relu",
    "dropout",
    "transposed_conv",
    "avg_pool",
    "max_pool",
    "linear",
    "residual_block",
    "upsample",
    "atrous_pyramid",
}

GRAPH_FORMAT = "cvs-graph/1"


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor: a unique name, a kind and its parameters."""
    name: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"Unknown layer kind {self.kind!r} for layer {self.name}")
        if "." in self.name or not self.name:
            raise ConfigError(f"Layer names must be non-empty and dot-free, got {self.name!r}")

    def to_dict(self) -> Dict:
        return {"name": self.name, "kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, data: Dict) -> "LayerSpec":
        return cls(data["name"], data["kind"], _untuple(data.get("params", {})))


def conv(name, channels, kernel=3, stride=1, dilation=1, padding=None, bias=False) -> LayerSpec:
    if padding is None:
        padding = dilation * (kernel // 2)
    return LayerSpec(name, "conv", {
        "kernel": kernel, "stride": stride, "channels": channels,
        "dilation": dilation, "padding": padding, "bias": bias,
    })


def transposed_conv(name, channels, kernel, stride, padding=0) -> LayerSpec:
    return LayerSpec(name, "transposed_conv", {
        "kernel": kernel, "stride": stride, "channels": channels, "padding": padding,
    })


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _untuple(value):
    if isinstance(value, dict):
        return {k: _untuple(v) for k, v in value.items()}
    if isinstance(value, list):
        return tuple(_untuple(v) for v in value)
    return value


def _conv_out(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _require_spatial(layer: LayerSpec, shape: Shape):
    if len(shape) != 3:
        raise ShapeError(f"Layer {layer.name} ({layer.kind}) needs an H x W x C input, got {shape}")


def infer_layer(layer: LayerSpec, shape: Shape) -> Shape:
    """Output shape of one layer for a given input shape."""
    p = layer.params
    kind = layer.kind
    if kind in ("relu", "dropout"):
        return shape
    if kind == "batch_norm":
        return shape
    if kind == "linear":
        if len(shape) != 1:
            raise ShapeError(f"Layer {layer.name} (linear) needs a vector input, got {shape}")
        return (p["out_features"],)
    _require_spatial(layer, shape)
    height, width, channels = shape
    if kind == "conv":
        h = _conv_out(height, p["kernel"], p["stride"], p["padding"], p["dilation"])
        w = _conv_out(width, p["kernel"], p["stride"], p["padding"], p["dilation"])
        out = (h, w, p["channels"])
    elif kind == "max_pool":
        h = _conv_out(height, p["kernel"], p["stride"], p["padding"])
        w = _conv_out(width, p["kernel"], p["stride"], p["padding"])
        out = (h, w, channels)
    elif kind == "transposed_conv":
        h = (height - 1) * p["stride"] - 2 * p["padding"] + p["kernel"]
        w = (width - 1) * p["stride"] - 2 * p["padding"] + p["kernel"]
        out = (h, w, p["channels"])
    elif kind == "avg_pool":
        return (channels,)
    elif kind == "residual_block":
        stride = p["stride"]
        out = ((height - 1) // stride + 1, (width - 1) // stride + 1, p["out_channels"])
    elif kind == "upsample":
        if p.get("size") is not None:
            out = (p["size"][0], p["size"][1], channels)
        else:
            out = (height * p["factor"], width * p["factor"], channels)
    elif kind == "atrous_pyramid":
        out = (height, width, p["channels"])
    else:  # pragma: no cover - guarded by LAYER_KINDS
        raise ConfigError(f"Unknown layer kind {kind}")
    if min(out) < 1:
        raise ShapeError(f"Layer {layer.name} ({kind}) produces an empty output {out} from {shape}")
    return out


def infer_shapes(input_shape: Shape, layers: List[LayerSpec]) -> List[Shape]:
    """Output shape after every layer, in order."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = infer_layer(layer, shape)
        shapes.append(shape)
    return shapes


@dataclass
class NetworkGraph:
    """
    Backbone or head description (architecture only, no weights)

    ``meta`` carries non-structural facts such as the backbone identifier
    or a pretrained-weights path.
    """
    name: str
    input_shape: Shape
    layers: List[LayerSpec]
    output_shape: Shape
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.output_shape = tuple(self.output_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"Graph {self.name} has duplicate layer names")
        inferred = self.infer_output_shape()
        if inferred != self.output_shape:
            raise ShapeError(
                f"Graph {self.name}: declared output {self.output_shape} but inference gives {inferred}"
            )

    def infer_output_shape(self) -> Shape:
        shapes = infer_shapes(self.input_shape, self.layers)
        return shapes[-1] if shapes else self.input_shape

    def layer_shapes(self) -> List[Tuple[LayerSpec, Shape, Shape]]:
        """(layer, input shape, output shape) for every layer."""
        rows = []
        shape = self.input_shape
        for layer in self.layers:
            out = infer_layer(layer, shape)
            rows.append((layer, shape, out))
            shape = out
        return rows

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkGraph":
        return cls(
            name=data["name"],
            input_shape=tuple(data["input_shape"]),
            layers=[LayerSpec.from_dict(d) for d in data["layers"]],
            output_shape=tuple(data["output_shape"]),
            meta=dict(data.get("meta", {})),
        )


@dataclass
class ModelGraph:
    """A backbone graph shared by one or more named heads (``seg``, ``clf``)."""
    backbone: NetworkGraph
    heads: Dict[str, NetworkGraph]
    method: str = "cvs"

    def __post_init__(self):
        if not self.heads:
            raise ConfigError("A model needs at least one head")
        for head_name, head in self.heads.items():
            if head.input_shape != self.backbone.output_shape:
                raise ShapeError(
                    f"Head {head_name} expects {head.input_shape} but backbone emits {self.backbone.output_shape}"
                )

    @property
    def input_shape(self) -> Shape:
        return self.backbone.input_shape

    @property
    def num_classes(self) -> int:
        if "clf" in self.heads:
            return self.heads["clf"].output_shape[0]
        return self.heads["seg"].output_shape[-1] - 1

    @cached_property
    def fingerprint(self) -> str:
        """Content hash of the graph, computed once per instance."""
        return config_hash(self.to_dict())

    def to_dict(self) -> Dict:
        return {
            "format": GRAPH_FORMAT,
            "method": self.method,
            "backbone": self.backbone.to_dict(),
            "heads": {name: head.to_dict() for name, head in self.heads.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelGraph":
        if data.get("format") != GRAPH_FORMAT:
            raise ConfigError(f"Unsupported graph format {data.get('format')!r}")
        return cls(
            backbone=NetworkGraph.from_dict(data["backbone"]),
            heads={name: NetworkGraph.from_dict(d) for name, d in data["heads"].items()},
            method=data.get("method", "cvs"),
        )

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# FLOP estimate
# ---------------------------------------------------------------------------

def _conv_flops(h_out, w_out, c_in, c_out, kernel) -> int:
    return 2 * h_out * w_out * c_in * c_out * kernel * kernel


def _layer_flops(layer: LayerSpec, in_shape: Shape, out_shape: Shape) -> int:
    p = layer.params
    if layer.kind == "conv":
        return _conv_flops(out_shape[0], out_shape[1], in_shape[2], out_shape[2], p["kernel"])
    if layer.kind == "transposed_conv":
        return _conv_flops(in_shape[0], in_shape[1], in_shape[2], out_shape[2], p["kernel"])
    if layer.kind == "linear":
        return 2 * in_shape[0] * out_shape[0]
    if layer.kind == "residual_block":
        h, w, c_out = out_shape
        c_in = in_shape[2]
        if p["style"] == "wide_basic":
            flops = _conv_flops(in_shape[0], in_shape[1], c_in, c_out, 3) + _conv_flops(h, w, c_out, c_out, 3)
        else:
            mid = p["mid_channels"]
            flops = (
                _conv_flops(in_shape[0], in_shape[1], c_in, mid, 1)
                + _conv_flops(h, w, mid, mid, 3)
                + _conv_flops(h, w, mid, c_out, 1)
            )
        if p["stride"] != 1 or c_in != c_out:
            flops += _conv_flops(h, w, c_in, c_out, 1)
        return flops
    if layer.kind == "atrous_pyramid":
        h, w, c_out = out_shape
        c_in = in_shape[2]
        branches = _conv_flops(h, w, c_in, c_out, 1) + len(p["rates"]) * _conv_flops(h, w, c_in, c_out, 3)
        pooled = _conv_flops(1, 1, c_in, c_out, 1)
        project = _conv_flops(h, w, c_out * (len(p["rates"]) + 2), c_out, 1)
        return branches + pooled + project
    return 0


def estimate_flops(graph: Union[NetworkGraph, ModelGraph]) -> int:
    """Approximate forward-pass FLOPs (2 x multiply-adds) of a graph."""
    if isinstance(graph, ModelGraph):
        return estimate_flops(graph.backbone) + sum(estimate_flops(h) for h in graph.heads.values())
    return sum(_layer_flops(layer, i, o) for layer, i, o in graph.layer_shapes())


def parameter_count(layer: LayerSpec, in_shape: Shape) -> int:
    """Closed-form parameter count for conv, transposed conv and linear layers."""
    p = layer.params
    if layer.kind == "linear":
        return in_shape[0] * p["out_features"] + p["out_features"]
    if layer.kind == "conv":
        weights = in_shape[2] * p["channels"] * p["kernel"] ** 2
        return weights + (p["channels"] if p["bias"] else 0)
    if layer.kind == "transposed_conv":
        return in_shape[2] * p["channels"] * p["kernel"] ** 2 + p["channels"]
    raise ConfigError(f"No closed-form parameter count for {layer.kind}")


def ceil_div(a: int, b: int) -> int:
    return int(math.ceil(a / b))
