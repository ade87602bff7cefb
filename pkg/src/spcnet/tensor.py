"""Dense float64 tensors with reverse-mode differentiation.

A deliberately small tape: only the operations the completion network needs,
all numpy-backed, all double precision.  Forward ops are pure; nodes record
their parents and a backward closure, and ``backward`` walks the graph in
reverse topological order, accumulating into ``.grad`` (multiple paths add).
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Value node of the differentiation record.

    ``requires_grad`` marks leaves whose ``.grad`` the caller wants; interior
    nodes participate in backward regardless whenever any ancestor requires
    gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p._tracked() for p in parents):
            out._parents = parents
            out._backward = backward
        return out

    def _tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # copy: g may be a view
        else:
            self.grad += g

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._node(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out_data = self.data - other.data

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._node(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        a_data, b_data = self.data, other.data

        def bwd(g):
            self._accumulate(_unbroadcast(g * b_data, a_data.shape))
            other._accumulate(_unbroadcast(g * a_data, b_data.shape))

        return Tensor._node(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data
        a_data, b_data = self.data, other.data

        def bwd(g):
            self._accumulate(_unbroadcast(g / b_data, a_data.shape))
            other._accumulate(_unbroadcast(-g * a_data / (b_data * b_data), b_data.shape))

        return Tensor._node(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Tensor._node(-self.data, (self,), bwd)

    def pow(self, exponent: float) -> "Tensor":
        out_data = self.data ** exponent
        x = self.data

        def bwd(g):
            self._accumulate(g * exponent * x ** (exponent - 1))

        return Tensor._node(out_data, (self,), bwd)

    def sqrt(self) -> "Tensor":
        root = np.sqrt(self.data)

        def bwd(g):
            self._accumulate(g * 0.5 / root)

        return Tensor._node(root, (self,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out_data = self.data.sum(axis=axis)
        shape = self.data.shape

        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Tensor._node(out_data, (self,), bwd)

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accumulate(g.reshape(old))

        return Tensor._node(out_data, (self,), bwd)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def parameter(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map ``x @ w + b``; differentiable in all arguments."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"linear: inner dimensions disagree, x has shape {x.data.shape} "
            f"and w has shape {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"linear: bias shape {b.data.shape} does not match output width "
            f"{w.data.shape[1]}"
        )
    out_data = x.data @ w.data + b.data
    x_data, w_data = x.data, w.data

    def bwd(g):
        x._accumulate(g @ w_data.T)
        w._accumulate(x_data.T @ g)
        b._accumulate(g.sum(axis=0))

    return Tensor._node(out_data, (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.data.shape} vs {b.data.shape}"
        )
    out_data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        a._accumulate(g @ b_data.T)
        b._accumulate(a_data.T @ g)

    return Tensor._node(out_data, (a, b), bwd)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity: relu, leaky_relu (default slope 0.2), tanh."""
    x = as_tensor(x)
    if kind == "relu":
        out_data = np.maximum(x.data, 0.0)
        mask = (x.data > 0.0).astype(np.float64)

        def bwd(g):
            x._accumulate(g * mask)

    elif kind == "leaky_relu":
        factor = np.where(x.data > 0.0, 1.0, slope)
        out_data = x.data * factor

        def bwd(g):
            x._accumulate(g * factor)

    elif kind == "tanh":
        out_data = np.tanh(x.data)
        deriv = 1.0 - out_data * out_data

        def bwd(g):
            x._accumulate(g * deriv)

    else:
        raise ValueError(f"unsupported activation kind {kind!r}")
    return Tensor._node(out_data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return activation(x, "leaky_relu", slope)


def reduce_max_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows; gradient goes to the lowest argmax row."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"reduce_max_rows: need a non-empty 2-d input, got {x.data.shape}")
    arg = x.data.argmax(axis=0)
    out_data = x.data[arg, np.arange(x.data.shape[1])]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[arg, np.arange(shape[1])] = g
        x._accumulate(gx)

    return Tensor._node(out_data, (x,), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by index; backward scatter-adds into the sources."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    out_data = x.data[idx]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return Tensor._node(out_data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (0 or 1); backward slices the gradient back."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            s[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ValueError(f"concat: extents disagree off axis {axis}: {ref} vs {s}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            t._accumulate(g[tuple(sl)])
            start += size

    return Tensor._node(out_data, tuple(tensors), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out_data = x.data[:, start:stop]
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        x._accumulate(gx)

    return Tensor._node(out_data, (x,), bwd)


def broadcast_row(x: Tensor, n: int) -> Tensor:
    """Repeat a [d] vector into an [n, d] matrix; backward sums the rows."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError(f"broadcast_row: expected a 1-d vector, got {x.data.shape}")
    out_data = np.tile(x.data, (n, 1))

    def bwd(g):
        x._accumulate(g.sum(axis=0))

    return Tensor._node(out_data, (x,), bwd)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Stack k copies of an [m, d] block into [k*m, d] (replica-major)."""
    x = as_tensor(x)
    m, d = x.data.shape
    out_data = np.tile(x.data, (k, 1))

    def bwd(g):
        x._accumulate(g.reshape(k, m, d).sum(axis=0))

    return Tensor._node(out_data, (x,), bwd)


def group_sum_rows(x: Tensor, group_size: int) -> Tensor:
    """Sum over consecutive row groups: [g*k, d] -> [g, d]."""
    x = as_tensor(x)
    total, d = x.data.shape
    if total % group_size != 0:
        raise ValueError(f"group_sum_rows: {total} rows not divisible by {group_size}")
    groups = total // group_size
    out_data = x.data.reshape(groups, group_size, d).sum(axis=1)

    def bwd(g):
        x._accumulate(np.repeat(g, group_size, axis=0))

    return Tensor._node(out_data, (x,), bwd)


def group_max_rows(x: Tensor, group_size: int) -> Tensor:
    """Max over consecutive row groups: [g*k, d] -> [g, d].

    Ties route gradient to the earliest row of the group, matching the
    lowest-index convention of ``reduce_max_rows``.
    """
    x = as_tensor(x)
    total, d = x.data.shape
    if total % group_size != 0:
        raise ValueError(f"group_max_rows: {total} rows not divisible by {group_size}")
    groups = total // group_size
    blocks = x.data.reshape(groups, group_size, d)
    arg = blocks.argmax(axis=1)
    out_data = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def bwd(g):
        gx = np.zeros((groups, group_size, d))
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        x._accumulate(gx.reshape(total, d))

    return Tensor._node(out_data, (x,), bwd)


class RunningStats:
    """Exponential-moving per-channel statistics for batch normalization."""

    __slots__ = ("mean", "var")

    def __init__(self, width: int):
        self.mean = np.zeros(width)
        self.var = np.ones(width)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats | None = None,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-column normalization.

    Train mode normalizes with the batch's own (biased) statistics and, when
    ``stats`` is given, folds them into the running estimates; eval mode
    normalizes with the running estimates.  The epsilon guard keeps
    zero-variance columns (including batches of one row) finite.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"batch_norm: need a non-empty 2-d input, got {x.data.shape}")
    if mode == "train":
        mu = x.mean(axis=0)
        centered = x - mu
        var = (centered * centered).mean(axis=0)
        if stats is not None:
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu.data
            stats.var = (1.0 - momentum) * stats.var + momentum * var.data
        scale = (var + eps).pow(-0.5)
        return gamma * (centered * scale) + beta
    if mode == "eval":
        if stats is None:
            raise ValueError("batch_norm: eval mode needs running stats")
        scale = 1.0 / np.sqrt(stats.var + eps)
        return gamma * ((x - constant(stats.mean)) * constant(scale)) + beta
    raise ValueError(f"batch_norm: unknown mode {mode!r}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable tensor with d(loss)/d(tensor).

    Accumulates into existing ``.grad`` arrays, so callers batching several
    losses zero grads between optimizer steps, not between calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
