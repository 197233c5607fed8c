"""Small numpy neural-network core: ops with hand-written gradients and Adam."""
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    batchnorm2d,
    check_finite,
    conv2d,
    linear,
    maxpool2d,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .gradcheck import grad_check, relative_error
from .layers import LayerParams
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "LayerParams",
    "adam_step",
    "batchnorm2d",
    "check_finite",
    "conv2d",
    "grad_check",
    "linear",
    "load_checkpoint",
    "maxpool2d",
    "relative_error",
    "relu",
    "save_checkpoint",
    "softmax",
    "softmax_cross_entropy",
]
