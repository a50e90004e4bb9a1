from .optim import AdamHyper, AdamState, adamw_step
from .tensor import (
    DEFAULT_DTYPE,
    Graph,
    Tensor,
    add,
    backward,
    cross_entropy_next_token,
    current_graph,
    embedding,
    gelu,
    getitem,
    layer_norm,
    mask_sentinel,
    matmul,
    mean_all,
    mul,
    reshape,
    softmax_rows,
    sum_all,
    transpose,
)

__all__ = [
    "AdamHyper",
    "AdamState",
    "DEFAULT_DTYPE",
    "Graph",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "cross_entropy_next_token",
    "current_graph",
    "embedding",
    "gelu",
    "getitem",
    "layer_norm",
    "mask_sentinel",
    "matmul",
    "mean_all",
    "mul",
    "reshape",
    "softmax_rows",
    "sum_all",
    "transpose",
]
