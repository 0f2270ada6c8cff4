from . import tensor as ops
from .gradcheck import GradCheckReport, finite_diff_check
from .nn import Attention, Conv3x3, Embedding, LayerNorm, Linear, MLP, Module, Parameter
from .optim import AdamW, OptimizerState, adamw_step
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "AdamW", "Attention", "Conv3x3", "Embedding", "GradCheckReport", "LayerNorm", "Linear",
    "MLP", "Module", "OptimizerState", "Parameter", "ShapeError", "Tensor", "adamw_step",
    "finite_diff_check", "no_grad", "ops",
]
