"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: every operation produces a node holding the forward value and a
hand-derived backward closure. The op set covers exactly what the encoders,
distillation losses and fusion layers need. Nodes whose inputs carry no
gradient are plain constants, so frozen-model forward passes build no graph.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import InvalidInputError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus the bookkeeping needed for the backward pass."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise InvalidInputError("tensor entries must be finite")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @staticmethod
    def _node(data: Array, parents: Sequence["Tensor"], backward) -> "Tensor":
        # Internal constructor: skips the finiteness check and drops the
        # closure entirely when no parent needs a gradient.
        out = object.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- shape / value accessors -------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = object.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.size != 1:
            raise InvalidInputError("backward() expects a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor._node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return Tensor._node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._node(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return Tensor._node(-a.data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise InvalidInputError("matmul operands must be at least 2-D")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return Tensor._node(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv) if inv is not None else g.transpose())

    return Tensor._node(a.data.transpose(axes), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return Tensor._node(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return Tensor._node(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        z = np.zeros_like(a.data)
        z[idx] = g
        _accumulate(a, z)

    return Tensor._node(a.data[idx], (a,), backward)


def take_rows(a, idx) -> Tensor:
    """Pick entry `idx[i]` from row i of a 2-D tensor; returns a 1-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, idx), g)
        _accumulate(a, z)

    return Tensor._node(a.data[rows, idx], (a,), backward)


# -- reductions ---------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape).copy())

    return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; gradient is defined as zero at the zero vector."""
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    nk = np.sqrt(sq)
    if keepdims:
        out = nk
    elif axis is None:
        out = nk.reshape(())
    else:
        out = np.squeeze(nk, axis=axis)

    def backward(g):
        gk = np.asarray(g).reshape(nk.shape)
        safe = np.where(nk > 0.0, nk, 1.0)
        _accumulate(a, gk / safe * a.data * (nk > 0.0))

    return Tensor._node(out, (a,), backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return Tensor._node(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return Tensor._node(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out)

    return Tensor._node(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return Tensor._node(np.maximum(a.data, 0.0), (a,), backward)


def gelu(a) -> Tensor:
    """Gaussian-error activation x * Phi(x), exact (erf) formulation."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return Tensor._node(a.data * cdf, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * (a.data > floor))

    return Tensor._node(np.maximum(a.data, floor), (a,), backward)


def clamp_max(a, ceiling: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * (a.data < ceiling))

    return Tensor._node(np.minimum(a.data, ceiling), (a,), backward)


# -- fused softmax family ------------------------------------------------------

# Softmax is fused (value + hand-derived Jacobian-vector product) both for
# numerical stability (max subtraction) and to keep graphs small.


def softmax(a, tau: float = 1.0, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner) / tau)

    return Tensor._node(y, (a,), backward)


def log_softmax(a, tau: float = 1.0, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data / tau
    s = z - z.max(axis=axis, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))
    y = np.exp(out)

    def backward(g):
        _accumulate(a, (g - y * g.sum(axis=axis, keepdims=True)) / tau)

    return Tensor._node(out, (a,), backward)


# -- correlation --------------------------------------------------------------


def pearson_rows(u, v, eps_var: float = 1e-12) -> Tensor:
    """Row-wise Pearson distance 1 - rho(u_i, v_i) of two equal-shape 2-D tensors.

    Rows where either side has variance below ``eps_var`` get rho := 0
    (distance 1) and a zero gradient: a constant vector carries no ranking
    information and the loss must stay finite there.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.data.shape != v.data.shape or u.data.ndim != 2:
        raise InvalidInputError("pearson_rows expects two 2-D tensors of equal shape")
    n_cols = u.data.shape[1]
    uc = u.data - u.data.mean(axis=1, keepdims=True)
    vc = v.data - v.data.mean(axis=1, keepdims=True)
    su2 = (uc * uc).sum(axis=1)
    sv2 = (vc * vc).sum(axis=1)
    ok = (su2 / n_cols >= eps_var) & (sv2 / n_cols >= eps_var)
    su2s = np.where(ok, su2, 1.0)
    sv2s = np.where(ok, sv2, 1.0)
    denom = np.sqrt(su2s) * np.sqrt(sv2s)
    rho = np.where(ok, (uc * vc).sum(axis=1) / denom, 0.0)

    def backward(g):
        # d(1 - rho)/d rho = -1; centering projects each row gradient onto
        # the zero-mean subspace.
        gm = np.where(ok, -g, 0.0)[:, None]
        if u.requires_grad:
            gu = gm * (vc / denom[:, None] - (rho / su2s)[:, None] * uc)
            _accumulate(u, gu - gu.mean(axis=1, keepdims=True))
        if v.requires_grad:
            gv = gm * (uc / denom[:, None] - (rho / sv2s)[:, None] * vc)
            _accumulate(v, gv - gv.mean(axis=1, keepdims=True))

    return Tensor._node(1.0 - rho, (u, v), backward)
