"""
Graph builders for the backbones and heads used by CvS and its baselines
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..config import settings
from ..exceptions import ConfigError, PretrainedWeightsUnavailable, ShapeError
from .graph import LayerSpec, ModelGraph, NetworkGraph, Shape, ceil_div, conv, infer_shapes, transposed_conv

WRN_DOWNSAMPLE = 4
RESNET_OUTPUT_STRIDE = 8


def _graph(name: str, input_shape: Shape, layers: List[LayerSpec], **meta) -> NetworkGraph:
    output_shape = infer_shapes(input_shape, layers)[-1]
    return NetworkGraph(name, tuple(input_shape), layers, output_shape, meta=meta)


def build_wide_resnet(depth: int = settings.WRN_DEPTH, width: int = settings.WRN_WIDTH,
                      dropout_rate: float = settings.DEFAULT_DROPOUT,
                      input_shape: Shape = (32, 32, 3)) -> NetworkGraph:
    """
    Wide residual network backbone

    Three groups of (depth - 4) / 6 pre-activation blocks with widths
    16k, 32k, 64k and strides 1, 2, 2, so features are 4x smaller than
    the input.

    Args:
        depth: Network depth, 6n + 4
        width: Widening factor k
        dropout_rate: Dropout inside each block
        input_shape: (H, W, C) of the input images

    Returns:
        Backbone graph with output (H/4, W/4, 64k)
    """
    if depth < 10 or (depth - 4) % 6 != 0:
        raise ConfigError(f"Wide ResNet depth must be 6n+4 with n >= 1, got {depth}")
    if width < 1:
        raise ConfigError(f"Wide ResNet width must be >= 1, got {width}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"Dropout rate must be in [0, 1), got {dropout_rate}")
    height, img_width = input_shape[:2]
    if height % WRN_DOWNSAMPLE or img_width % WRN_DOWNSAMPLE:
        raise ShapeError(f"Wide ResNet input {input_shape} must be divisible by {WRN_DOWNSAMPLE}")

    blocks_per_group = (depth - 4) // 6
    layers = [conv("conv1", 16, kernel=3, bias=True)]
    for g, (planes, stride) in enumerate([(16, 1), (32, 2), (64, 2)], start=1):
        for b in range(blocks_per_group):
            layers.append(LayerSpec(f"group{g}_block{b + 1}", "residual_block", {
                "style": "wide_basic",
                "out_channels": planes * width,
                "stride": stride if b == 0 else 1,
                "dropout": dropout_rate,
            }))
    return _graph(f"wrn-{depth}-{width}", input_shape, layers,
                  backbone="wide-resnet", depth=depth, width=width, dropout=dropout_rate)


def resolve_resnet_weights(weights_path: Optional[str] = None) -> str:
    """Locate local ResNet-101 weights or raise ``PretrainedWeightsUnavailable``."""
    path = weights_path or settings.RESNET101_WEIGHTS
    if not path or not Path(path).is_file():
        raise PretrainedWeightsUnavailable(
            f"Pretrained ResNet-101 requested but no weights file found (got {path!r}); "
            "set CVS_RESNET101_WEIGHTS to a torchvision resnet101 state dict"
        )
    return str(path)


def build_resnet101(pretrained: bool = False, dilated: bool = True,
                    input_shape: Shape = (settings.RESNET101_INPUT_SIZE, settings.RESNET101_INPUT_SIZE, 3),
                    weights_path: Optional[str] = None) -> NetworkGraph:
    """
    ResNet-101 backbone with bottleneck stages [3, 4, 23, 3]

    With ``dilated`` the last two stages keep resolution through dilation,
    giving an output stride of 8.
    """
    meta = {"backbone": "resnet101", "pretrained": bool(pretrained), "dilated": bool(dilated)}
    if pretrained:
        meta["weights_path"] = resolve_resnet_weights(weights_path)

    layers = [
        conv("conv1", 64, kernel=7, stride=2, padding=3),
        LayerSpec("bn1", "batch_norm"),
        LayerSpec("relu", "relu"),
        LayerSpec("maxpool", "max_pool", {"kernel": 3, "stride": 2, "padding": 1}),
    ]
    dilation = 1
    for stage, (planes, blocks, stride) in enumerate([(64, 3, 1), (128, 4, 2), (256, 23, 2), (512, 3, 2)], start=1):
        previous_dilation = dilation
        if dilated and stage >= 3:
            dilation *= stride
            stride = 1
        for b in range(blocks):
            layers.append(LayerSpec(f"layer{stage}_{b}", "residual_block", {
                "style": "bottleneck",
                "mid_channels": planes,
                "out_channels": planes * 4,
                "stride": stride if b == 0 else 1,
                "dilation": previous_dilation if b == 0 else dilation,
            }))
    return _graph("resnet101", input_shape, layers, **meta)


def backbone_kind(backbone: NetworkGraph) -> str:
    return backbone.meta.get("backbone", "wide-resnet")


def build_cvs_head(backbone: NetworkGraph, num_classes: int, target_shape: Tuple[int, int]) -> NetworkGraph:
    """
    Per-pixel head producing P+1 channels at the exact target resolution

    Wide ResNet features are upsampled 4x by a single transposed conv.
    ResNet-101 features go through an atrous pyramid (rates 12/24/36)
    and a 1x1 projection, then a bilinear resize to the target.

    Raises:
        ShapeError: If the feature map cannot reach ``target_shape``
    """
    _check_classes(num_classes)
    feature_shape = backbone.output_shape
    height, width = target_shape
    fh, fw = feature_shape[:2]
    if backbone_kind(backbone) == "resnet101":
        if (ceil_div(height, RESNET_OUTPUT_STRIDE), ceil_div(width, RESNET_OUTPUT_STRIDE)) != (fh, fw):
            raise ShapeError(
                f"Features {feature_shape} do not match target {target_shape} at output stride {RESNET_OUTPUT_STRIDE}"
            )
        layers = [
            LayerSpec("aspp", "atrous_pyramid", {
                "rates": tuple(settings.ASPP_RATES), "channels": settings.ASPP_CHANNELS,
            }),
            conv("conv", settings.ASPP_CHANNELS, kernel=3),
            LayerSpec("bn", "batch_norm"),
            LayerSpec("relu", "relu"),
            conv("projection", num_classes + 1, kernel=1, bias=True),
            LayerSpec("resize", "upsample", {"size": (height, width)}),
        ]
    else:
        if (fh * WRN_DOWNSAMPLE, fw * WRN_DOWNSAMPLE) != (height, width):
            raise ShapeError(
                f"Features {feature_shape} upsampled {WRN_DOWNSAMPLE}x cannot reach target {target_shape}"
            )
        layers = [
            LayerSpec("bn", "batch_norm"),
            LayerSpec("relu", "relu"),
            transposed_conv("projection", num_classes + 1, kernel=WRN_DOWNSAMPLE, stride=WRN_DOWNSAMPLE),
        ]
    return _graph("cvs-head", feature_shape, layers, head="seg")


def build_linear_head(backbone: NetworkGraph, num_classes: int) -> NetworkGraph:
    """Global average pooling followed by a P-way linear layer."""
    _check_classes(num_classes)
    layers = []
    if backbone_kind(backbone) != "resnet101":
        # pre-activation backbones end without a final BN/ReLU
        layers += [LayerSpec("bn", "batch_norm"), LayerSpec("relu", "relu")]
    layers += [LayerSpec("pool", "avg_pool"), LayerSpec("fc", "linear", {"out_features": num_classes})]
    return _graph("linear-head", backbone.output_shape, layers, head="clf")


def build_multitask_heads(backbone: NetworkGraph, num_classes: int,
                          target_shape: Tuple[int, int]) -> Dict[str, NetworkGraph]:
    """
    Segmentation and classification heads on a shared backbone

    On ResNet-101 the segmentation head is three stride-2 transposed convs,
    the first two followed by ReLU and batch norm. On Wide ResNet it is the
    CvS head.
    """
    clf = build_linear_head(backbone, num_classes)
    if backbone_kind(backbone) != "resnet101":
        return {"seg": build_cvs_head(backbone, num_classes, target_shape), "clf": clf}

    feature_shape = backbone.output_shape
    height, width = target_shape
    layers = [
        transposed_conv("up1", 256, kernel=4, stride=2, padding=1),
        LayerSpec("relu1", "relu"),
        LayerSpec("bn1", "batch_norm"),
        transposed_conv("up2", 128, kernel=4, stride=2, padding=1),
        LayerSpec("relu2", "relu"),
        LayerSpec("bn2", "batch_norm"),
        transposed_conv("projection", num_classes + 1, kernel=4, stride=2, padding=1),
    ]
    upsampled = infer_shapes(feature_shape, layers)[-1]
    if upsampled[:2] != (height, width):
        layers.append(LayerSpec("resize", "upsample", {"size": (height, width)}))
    seg = _graph("multitask-seg-head", feature_shape, layers, head="seg")
    return {"seg": seg, "clf": clf}


def _check_classes(num_classes: int):
    if num_classes < 1:
        raise ConfigError(f"Number of classes must be >= 1, got {num_classes}")


def build_backbone(name: str, input_shape: Shape, depth: int = settings.WRN_DEPTH,
                   width: int = settings.WRN_WIDTH, dropout_rate: float = settings.DEFAULT_DROPOUT,
                   pretrained: bool = False, weights_path: Optional[str] = None) -> NetworkGraph:
    if name == "wide-resnet":
        return build_wide_resnet(depth, width, dropout_rate, input_shape)
    if name == "resnet101":
        return build_resnet101(pretrained=pretrained, input_shape=input_shape, weights_path=weights_path)
    raise ConfigError(f"Unknown backbone {name!r}; expected one of {sorted(settings.BACKBONES)}")


def build_model_graph(method: str, backbone: NetworkGraph, num_classes: int) -> ModelGraph:
    """
    Attach the heads a training method needs

    ``cvs`` and ``segmentation-only`` get a per-pixel head, ``classification``
    a linear head and ``multitask`` both.
    """
    target = backbone.input_shape[:2]
    if method in ("cvs", "segmentation-only"):
        heads = {"seg": build_cvs_head(backbone, num_classes, target)}
    elif method == "classification":
        heads = {"clf": build_linear_head(backbone, num_classes)}
    elif method == "multitask":
        heads = build_multitask_heads(backbone, num_classes, target)
    else:
        raise ConfigError(f"Unknown method {method!r}; expected one of {sorted(settings.METHODS)}")
    return ModelGraph(backbone=backbone, heads=heads, method=method)


@dataclass(frozen=True)
class NetworkConfig:
    """Backbone selection and hyperparameters of a run."""
    backbone: str = "wide-resnet"
    depth: int = settings.WRN_DEPTH
    width: int = settings.WRN_WIDTH
    dropout: float = settings.DEFAULT_DROPOUT
    pretrained: bool = False
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.backbone not in settings.BACKBONES:
            raise ConfigError(f"Unknown backbone {self.backbone!r}; expected one of {settings.BACKBONES}")
        if self.pretrained and self.backbone != "resnet101":
            raise ConfigError("Pretrained weights are only available for resnet101")

    def build(self, method: str, input_shape: Shape, num_classes: int) -> ModelGraph:
        backbone = build_backbone(
            self.backbone, input_shape, self.depth, self.width, self.dropout,
            pretrained=self.pretrained, weights_path=self.weights_path,
        )
        return build_model_graph(method, backbone, num_classes)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown network config keys: {unknown}")
        return cls(**data)
