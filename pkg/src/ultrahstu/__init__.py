"""Jagged-sequence HSTU recommendation layers in numpy, with the tooling around them."""

from .attention import MaskSpec, attention_backward, attention_forward, mask_allows, mask_nnz
from .hstu_core import HstuLayerParams, layer_backward, layer_backward_remat, layer_forward
from .jagged import JaggedBatch, build_jagged
from .metrics_scaling import flops_model, normalized_entropy
from .topology import BranchConfig, ModelConfig, StageConfig, model_backward, model_forward

__version__ = "0.1.0"

__all__ = [
    "MaskSpec",
    "attention_forward",
    "attention_backward",
    "mask_allows",
    "mask_nnz",
    "HstuLayerParams",
    "layer_forward",
    "layer_backward",
    "layer_backward_remat",
    "JaggedBatch",
    "build_jagged",
    "flops_model",
    "normalized_entropy",
    "ModelConfig",
    "StageConfig",
    "BranchConfig",
    "model_forward",
    "model_backward",
]
