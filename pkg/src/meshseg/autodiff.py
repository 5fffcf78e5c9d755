"""Minimal dense tensor library with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record their provenance; ``backward`` walks
the graph in reverse topological order with a deterministic accumulation
order. Only the primitives the segmentation network needs are provided:
no general broadcasting beyond bias addition, no views, no in-place math
on live graph nodes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "transpose",
    "concat_last",
    "slice_last",
    "reduce_sum",
    "reduce_mean",
    "embedding_lookup",
    "masked_softmax",
    "log_softmax",
    "gather_rows",
    "layer_norm",
    "dropout",
    "backward",
]


class ShapeMismatchError(ValueError):
    pass


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeMismatchError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    ``grad`` is populated (or accumulated into) by :func:`backward`;
    constants built from plain arrays do not require gradients and are
    pruned from the traversal.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # light operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check(
        a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
        "matmul",
        a.shape,
        b.shape,
    )
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    out._backward_fn = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; the second operand may be a 1-D bias broadcast
    over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    bias = b.data.ndim == 1 and a.data.ndim > 1
    _check(
        a.shape == b.shape or (bias and a.shape[-1] == b.shape[0]),
        "add",
        a.shape,
        b.shape,
    )
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward_fn(g):
        gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias else g
        return g, gb

    out._backward_fn = backward_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check(a.shape == b.shape, "mul", a.shape, b.shape)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward_fn(g):
        return g * b.data, g * a.data

    out._backward_fn = backward_fn
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    out = Tensor(a.data * s, _parents=(a,))
    out._backward_fn = lambda g: (g * s,)
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), _parents=(a,))
    # subgradient at 0 is taken as 0
    out._backward_fn = lambda g: (g * (a.data > 0),)
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check(a.data.ndim == 2, "transpose", a.shape)
    out = Tensor(a.data.T.copy(), _parents=(a,))
    out._backward_fn = lambda g: (g.T,)
    return out


def concat_last(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.shape[-1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1), _parents=tuple(tensors))

    def backward_fn(g):
        return tuple(np.split(g, np.cumsum(widths)[:-1], axis=-1))

    out._backward_fn = backward_fn
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[..., start:stop].copy(), _parents=(a,))

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    out._backward_fn = backward_fn
    return out


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), _parents=(a,))

    def backward_fn(g):
        if axis is None:
            return (np.full_like(a.data, 1.0) * g,)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    out._backward_fn = backward_fn
    return out


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / count)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; gradients scatter-add back."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    _check(table.data.ndim == 2, "embedding_lookup", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range: max {ids.max()} for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids], _parents=(table,))

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    out._backward_fn = backward_fn
    return out


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax of ``scores + mask`` where the mask holds 0 or -inf.

    Rows that are entirely masked produce all zeros (not NaN) and
    contribute zero gradient.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=scores.dtype)
    _check(mask.shape == scores.shape, "masked_softmax", scores.shape, mask.shape)
    z = scores.data + mask
    row_max = np.max(z, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(row_max), row_max, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - shift)
    e = np.where(np.isfinite(z), e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0).astype(scores.dtype)
    out = Tensor(y, _parents=(scores,))

    def backward_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    out._backward_fn = backward_fn
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    a = _as_tensor(a)
    shift = a.data - a.data.max(axis=-1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    out = Tensor(logp.astype(a.dtype), _parents=(a,))

    def backward_fn(g):
        return (g - np.exp(logp) * g.sum(axis=-1, keepdims=True),)

    out._backward_fn = backward_fn
    return out


def gather_rows(a: Tensor, cols) -> Tensor:
    """Pick one entry per row of a matrix: ``out[i] = a[i, cols[i]]``."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    _check(a.data.ndim == 2 and cols.shape == (a.shape[0],), "gather_rows", a.shape, cols.shape)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, cols].copy(), _parents=(a,))

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[rows, cols] = g
        return (ga,)

    out._backward_fn = backward_fn
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable gain and shift.

    Uses the population variance of each row.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    width = x.shape[-1]
    _check(gamma.shape == (width,) and beta.shape == (width,), "layer_norm", x.shape, gamma.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor((xhat * gamma.data + beta.data).astype(x.dtype), _parents=(x, gamma, beta))

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv_std
        return dx, dgamma, dbeta

    out._backward_fn = backward_fn
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by
    1/(1-p) at training time; identity in eval mode."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = Tensor(x.data * keep, _parents=(x,))
    out._backward_fn = lambda g: (g * keep,)
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into ``.grad``.

    Gradients add onto any existing ``.grad`` arrays of reachable tensors
    that require gradients, so per-sample losses in a batch can be
    accumulated by repeated calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # iterative post-order over the subgraph that requires gradients
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg.copy() if acc is None else acc + pg
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
