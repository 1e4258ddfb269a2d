"""Relaxed rotation-equivariant group convolutions over C4, on a small numpy autodiff engine."""

from .filters import build_relaxed_filters, strictness_gap
from .group import (C4, PerturbationDelta, act_on_coords, act_on_group_feature, act_on_input, compose,
                    inverse, relaxed_affine, strict_affine)
from .layers import (GCBA, GSPPF, Bottleneck, GConcat, R2GConv, R2GUp, R2Lifting, R2NetBlock,
                     TransferBlock, gconcat)
from .models import ModelSpec, R2NetToy, build_r2net_toy, param_count
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "C4", "GCBA", "GSPPF", "Bottleneck", "GConcat", "ModelSpec", "PerturbationDelta", "R2GConv", "R2GUp",
    "R2Lifting", "R2NetBlock", "R2NetToy", "Tensor", "TransferBlock", "act_on_coords", "act_on_group_feature",
    "act_on_input", "backward", "build_r2net_toy", "build_relaxed_filters", "compose", "gconcat", "inverse",
    "no_grad", "param_count", "precision", "relaxed_affine", "strict_affine", "strictness_gap",
]
