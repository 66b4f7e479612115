"""Numerical core: hand-written forward/backward kernels, layers, and Adam."""

from .core import (
    Parameter,
    conv2d,
    conv2d_grads,
    embedding_forward,
    embedding_grad,
    instance_norm,
    instance_norm_grads,
    dropout,
    global_avg_pool,
    broadcast_up,
    masked_softmax_xent,
)
from .optim import Adam
from .gradcheck import central_difference, grad_check, max_rel_error

__all__ = [
    "Parameter",
    "conv2d",
    "conv2d_grads",
    "embedding_forward",
    "embedding_grad",
    "instance_norm",
    "instance_norm_grads",
    "dropout",
    "global_avg_pool",
    "broadcast_up",
    "masked_softmax_xent",
    "Adam",
    "central_difference",
    "grad_check",
    "max_rel_error",
]
