"""Minimal dense tensors with reverse-mode differentiation."""

from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import MLP, Init, LayerNorm, Linear, Module, Parameter
from .ops import (
    bce_with_logits,
    bilinear_resize,
    conv2d_3x3,
    gather_last,
    layer_norm,
    linear,
    log_softmax,
    smooth_l1,
    softmax,
)
from .optim import Adam
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    exp,
    gelu,
    getitem,
    log,
    matmul,
    maximum,
    minimum,
    mul,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    stack,
    sub,
    tanh,
    tensor_mean,
    tensor_sum,
    transpose,
)


def backward(loss: Tensor) -> dict:
    """Backpropagate a scalar loss; returns ``{leaf: gradient}`` for this call."""
    return loss.backward()
