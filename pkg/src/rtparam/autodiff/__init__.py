"""Minimal reverse-mode autodiff engine: tensors, network primitives,
losses, Adam, and finite-difference gradient checking."""

from .tensor import (
    Tensor,
    absolute,
    add,
    backward,
    concat,
    grad_enabled,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    set_check_finite,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .functional import (
    MASKED_LOGIT,
    attention,
    batch_norm2d,
    conv2d,
    layer_norm,
    maxpool2d,
    softmax,
    upsample_nearest2x,
)
from .losses import huber_loss, l1_loss
from .optim import Adam
from .gradcheck import gradcheck, make_input
from .module import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
)

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "ConvBNReLU",
    "LayerNorm",
    "Linear",
    "MASKED_LOGIT",
    "Module",
    "ModuleList",
    "Tensor",
    "absolute",
    "add",
    "attention",
    "backward",
    "batch_norm2d",
    "concat",
    "conv2d",
    "grad_enabled",
    "gradcheck",
    "huber_loss",
    "l1_loss",
    "layer_norm",
    "make_input",
    "matmul",
    "maxpool2d",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "set_check_finite",
    "softmax",
    "sub",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "upsample_nearest2x",
]
