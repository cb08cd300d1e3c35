"""Validated numeric primitives: tempered softmax, Pearson distance, KL
divergence, L2 norm and multi-head self-attention.

The array-in/array-out functions here are the public contract surface; they
ride on the differentiable ops in :mod:`emofuse.autodiff`, so the same code
path serves both plain evaluation and gradient-carrying graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InvalidInputError, InvalidParameterError

EPS_VARIANCE = 1e-12
EPS_PROB = 1e-12


def softmax_temp(logits, tau: float) -> np.ndarray:
    """Temperature-scaled softmax of a vector, computed with max subtraction.

    Raises InvalidParameterError for tau <= 0 and InvalidInputError for empty
    or non-finite input.
    """
    if not np.isreal(tau) or not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau!r}")
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("softmax_temp requires a non-empty vector")
    if not np.isfinite(arr).all():
        raise InvalidInputError("softmax_temp input must be finite")
    return ad.softmax(Tensor(arr), tau=float(tau), axis=-1).data


def pearson_distance(u, v) -> float:
    """1 - Pearson correlation of two equal-length vectors (length >= 2).

    Either vector having variance below ``EPS_VARIANCE`` yields distance 1
    (correlation taken as zero by convention).
    """
    ua = np.asarray(u, dtype=np.float64)
    va = np.asarray(v, dtype=np.float64)
    if ua.ndim != 1 or va.ndim != 1 or ua.shape != va.shape:
        raise InvalidInputError("pearson_distance requires two equal-length vectors")
    if ua.size < 2:
        raise InvalidInputError("pearson_distance requires length >= 2")
    out = ad.pearson_rows(Tensor(ua.reshape(1, -1)), Tensor(va.reshape(1, -1)),
                          eps_var=EPS_VARIANCE)
    return float(out.data[0])


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence sum(p * ln(p/q)) with 0*ln(0/q) = 0.

    Entries of q are floored at ``EPS_PROB`` before the log; p must be a
    probability vector (nonnegative, summing to 1 within 1e-9).
    """
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape or pa.ndim != 1:
        raise InvalidInputError("kl_divergence requires two equal-length vectors")
    if (pa < 0).any() or abs(pa.sum() - 1.0) > 1e-9:
        raise InvalidInputError("p must be a probability vector summing to 1")
    qc = np.maximum(qa, EPS_PROB)
    mask = pa > 0
    return float(np.sum(pa[mask] * np.log(pa[mask] / qc[mask])))


def l2_norm(x) -> float:
    """Euclidean norm of a vector."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise InvalidInputError("l2_norm input must be finite")
    return float(np.sqrt(np.sum(arr * arr)))


@dataclass
class AttentionParams:
    """Projection weights for multi-head self-attention over d-dim tokens."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AttentionParams":
        limit = np.sqrt(6.0 / (dim + dim))
        def draw():
            return Tensor(rng.uniform(-limit, limit, size=(dim, dim)),
                          requires_grad=True)
        return cls(wq=draw(), wk=draw(), wv=draw(), wo=draw())

    @classmethod
    def zeros(cls, dim: int) -> "AttentionParams":
        z = lambda: Tensor(np.zeros((dim, dim)), requires_grad=True)
        return cls(wq=z(), wk=z(), wv=z(), wo=z())

    @classmethod
    def identity(cls, dim: int) -> "AttentionParams":
        e = lambda: Tensor(np.eye(dim), requires_grad=True)
        return cls(wq=e(), wk=e(), wv=e(), wo=e())

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]

    def state(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq.data, "wk": self.wk.data,
                "wv": self.wv.data, "wo": self.wo.data}


def multi_head_self_attention(tokens, params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product self-attention with `heads` heads and an output
    projection. Accepts a (T, d) token matrix or a (B, T, d) batch; scaling is
    1/sqrt(d/heads) and no mask is applied.
    """
    t = ad.as_tensor(tokens)
    single = t.data.ndim == 2
    x = t.reshape((1,) + t.data.shape) if single else t
    if x.data.ndim != 3:
        raise InvalidInputError("attention expects (T, d) or (B, T, d) tokens")
    batch, n_tok, dim = x.data.shape
    if n_tok < 1:
        raise InvalidInputError("attention requires at least one token")
    if heads < 1 or dim % heads != 0:
        raise ConfigurationError(
            f"token dim {dim} not divisible by heads {heads}")
    head_dim = dim // heads

    def split(h: Tensor) -> Tensor:
        return h.reshape((batch, n_tok, heads, head_dim)).transpose((0, 2, 1, 3))

    q = split(x @ params.wq)
    k = split(x @ params.wk)
    v = split(x @ params.wv)
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose((0, 2, 1, 3)).reshape((batch, n_tok, dim))
    out = ctx @ params.wo
    return out.reshape((n_tok, dim)) if single else out


@dataclass
class DualValue:
    """A scalar value paired with its gradient w.r.t. a declared parameter set."""

    value: float
    gradient: np.ndarray


def value_and_grad(fn, params: list[Tensor]) -> DualValue:
    """Evaluate ``fn()`` (a scalar Tensor built from ``params``) and return the
    value together with the flattened gradient over ``params``."""
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    flat = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        for p in params
    ]) if params else np.zeros(0)
    return DualValue(value=float(out.data), gradient=flat)
