"""Dense tensors with a tape-based reverse-mode autodiff.

Operations record onto the innermost active :class:`Graph` (a context
manager, confined to the thread that entered it) whenever at least one
input requires a gradient. Outside a graph every op is a plain numpy
computation, which is how inference runs.

Example:
    >>> w = Tensor([[1.0, 2.0]], requires_grad=True, dtype=np.float64)
    >>> with Graph() as g:
    ...     loss = (w * w).sum()
    ...     grads = g.backward(loss)
    >>> grads[w].tolist()
    [[2.0, 4.0]]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import kernels

DEFAULT_DTYPE = np.float32

# Additive "minus infinity" for masked attention logits, per precision.
MASK_SENTINEL = {np.dtype(np.float32): -1e9, np.dtype(np.float64): -1e30}
_MASKED_BELOW = -1e8

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


def mask_sentinel(dtype) -> float:
    return MASK_SENTINEL.get(np.dtype(dtype), -1e9)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Graph:
    """Append-only op tape; insertion order is a topological order."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph exited out of order or on another thread")
        stack.pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def backward(graph: Graph, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) through ``graph`` in reverse insertion order.

    Returns a mapping from every leaf tensor with ``requires_grad`` that
    the loss depends on to its gradient array; the gradient is also stored
    on ``tensor.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in graph.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    out = {}
    for key, tensor in leaves.items():
        g = grads[key]
        tensor.grad = g
        out[tensor] = g
    return out


def _needs_grad(*tensors) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _finish(op, inputs, out_data, backward_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    graph = current_graph()
    track = graph is not None and _needs_grad(*inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        graph.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _as_tensor(b, a.dtype)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), a.data + b.data, bwd)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor, an array, or a scalar."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)

        def bwd_const(g):
            return (_unbroadcast(g * const, a.shape),)

        return _finish("mul", (a,), a.data * const, bwd_const)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), a.data * b.data, bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    data = np.ascontiguousarray(x.data)

    def bwd(g):
        return (kernels.gelu_bwd(data, np.ascontiguousarray(g)),)

    return _finish("gelu", (x,), kernels.gelu_fwd(data), bwd)


# shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bwd(g):
        return (g.reshape(src),)

    return _finish("reshape", (x,), x.data.reshape(shape), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _finish("transpose", (x,), np.transpose(x.data, axes), bwd)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    out = x.data[idx]
    return _finish("getitem", (x,), np.array(out, copy=True), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _finish("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), bwd)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(Batched) matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", (a, b), np.matmul(a.data, b.data), bwd)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _finish("embedding", (weight,), weight.data[ids], bwd)


# normalisation / probabilities --------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty feature axis")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mu, rstd = kernels.layer_norm_fwd(flat, gamma.data, beta.data, x.dtype.type(eps))

    def bwd(g):
        dx, dg, db = kernels.layer_norm_bwd(
            np.ascontiguousarray(g.reshape(-1, d)), flat, mu, rstd, gamma.data
        )
        return dx.reshape(x.shape), dg, db

    return _finish("layer_norm", (x, gamma, beta), y.reshape(x.shape), bwd)


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis after adding a constant mask.

    Masked entries carry a large negative value (``-inf`` is replaced by
    the precision's sentinel). A row with every entry masked is an error.
    """
    z = x.data
    if additive_mask is not None:
        mask = np.asarray(additive_mask, dtype=x.dtype)
        if np.isneginf(mask).any():
            mask = np.where(np.isneginf(mask), mask_sentinel(x.dtype), mask)
        full = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, z.shape))
        if (full <= _MASKED_BELOW).all(axis=-1).any():
            raise ValueError("softmax row with every position masked")
        z = z + mask
    d = z.shape[-1]
    y = kernels.softmax_fwd(np.ascontiguousarray(z.reshape(-1, d))).reshape(z.shape)

    def bwd(g):
        dy = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.softmax_bwd(y.reshape(-1, d), dy).reshape(z.shape),)

    return _finish("softmax", (x,), y, bwd)


def cross_entropy_next_token(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    Rows are already aligned with their targets (row t predicts target t),
    so for a token sequence the caller passes ``logits[:-1]`` and
    ``tokens[1:]``. The result is the sequence's log perplexity.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty target sequence")
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ValueError(f"logits {logits.shape} do not match {targets.size} targets")
    vocab = logits.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    data = np.ascontiguousarray(logits.data)
    nll, probs = kernels.nll_rows(data, targets)
    n = targets.size

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return _finish("cross_entropy", (logits,), np.asarray(nll.mean(), dtype=logits.dtype), bwd)
