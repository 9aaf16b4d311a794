from . import ops
from .gradcheck import gradcheck, gradcheck_params, shadow64
from .ops import (
    broadcast_to,
    concat,
    cosine_similarity,
    gelu,
    layernorm,
    logsumexp,
    matmul,
    relu,
    softmax,
    stack,
    stop_gradient,
    take_rows,
)
from .tensor import (
    ComputationTape,
    DomainError,
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    zero_grads,
)

__all__ = [
    "ComputationTape", "DomainError", "GraphError", "NumericError", "ShapeError", "Tensor",
    "backward", "broadcast_to", "concat", "cosine_similarity", "default_dtype", "gelu",
    "gradcheck", "gradcheck_params", "layernorm", "logsumexp", "matmul", "no_grad", "ops",
    "relu", "shadow64", "softmax", "stack", "stop_gradient", "take_rows", "zero_grads",
]
