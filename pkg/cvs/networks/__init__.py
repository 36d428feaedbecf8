"""
Network graphs, builders and materialization
"""

from .builders import (
    NetworkConfig,
    build_backbone,
    build_cvs_head,
    build_linear_head,
    build_model_graph,
    build_multitask_heads,
    build_resnet101,
    build_wide_resnet,
)
from .graph import LayerSpec, ModelGraph, NetworkGraph, estimate_flops, infer_shapes
from .modules import (
    CvsNet,
    ModelParams,
    forward,
    images_to_tensor,
    materialize,
    validate_params,
)

__all__ = [
    'CvsNet',
    'LayerSpec',
    'ModelGraph',
    'ModelParams',
    'NetworkConfig',
    'NetworkGraph',
    'build_backbone',
    'build_cvs_head',
    'build_linear_head',
    'build_model_graph',
    'build_multitask_heads',
    'build_resnet101',
    'build_wide_resnet',
    'estimate_flops',
    'forward',
    'images_to_tensor',
    'infer_shapes',
    'materialize',
    'validate_params',
]
