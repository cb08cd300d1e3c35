"""Stub modality encoders and classification heads.

Each encoder is a two-layer perceptron (input -> 2d -> d) with a smooth
Gaussian-error nonlinearity between the layers, standing in for the large
pretrained per-modality models whose weights are out of scope. Teacher and
students share this architecture and differ only in input dimension and
training regime.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class StubEncoder:
    """Affine -> gelu -> affine map from a modality feature vector to R^d."""

    def __init__(self, modality: str, w1: Tensor, b1: Tensor,
                 w2: Tensor, b2: Tensor):
        self.modality = modality
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @property
    def input_dim(self) -> int:
        return self.w1.data.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.data.shape[1]

    @classmethod
    def init(cls, modality: str, input_dim: int, embed_dim: int,
             rng: np.random.Generator) -> "StubEncoder":
        hidden = 2 * embed_dim
        return cls(
            modality,
            w1=Tensor(xavier_uniform(rng, input_dim, hidden), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(xavier_uniform(rng, hidden, embed_dim), requires_grad=True),
            b2=Tensor(np.zeros(embed_dim), requires_grad=True),
        )

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise InvalidInputError(
                f"{self.modality} encoder expects (B, {self.input_dim}) input, "
                f"got {x.data.shape}")
        hidden = ad.gelu(x @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1.data, "b1": self.b1.data,
                "w2": self.w2.data, "b2": self.b2.data}

    @classmethod
    def from_state(cls, modality: str, state: dict[str, np.ndarray]) -> "StubEncoder":
        return cls(modality, *(Tensor(state[k].copy(), requires_grad=True)
                               for k in ("w1", "b1", "w2", "b2")))


class ClassifierHead:
    """Single affine map from an embedding to class logits."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight, self.bias = weight, bias

    @property
    def input_dim(self) -> int:
        return self.weight.data.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.data.shape[1]

    @classmethod
    def init(cls, input_dim: int, num_classes: int,
             rng: np.random.Generator) -> "ClassifierHead":
        return cls(
            weight=Tensor(xavier_uniform(rng, input_dim, num_classes),
                          requires_grad=True),
            bias=Tensor(np.zeros(num_classes), requires_grad=True),
        )

    def forward(self, embedding) -> Tensor:
        e = ad.as_tensor(embedding)
        if e.data.ndim != 2 or e.data.shape[1] != self.input_dim:
            raise InvalidInputError(
                f"classifier expects (B, {self.input_dim}) input, got {e.data.shape}")
        return e @ self.weight + self.bias

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ClassifierHead":
        return cls(weight=Tensor(state["weight"].copy(), requires_grad=True),
                   bias=Tensor(state["bias"].copy(), requires_grad=True))

    def copy(self) -> "ClassifierHead":
        return ClassifierHead.from_state(self.state())


def encode(encoder: StubEncoder, features) -> np.ndarray:
    """Map a single feature vector (or a batch of rows) to embeddings."""
    arr = np.asarray(features, dtype=np.float64)
    single = arr.ndim == 1
    out = encoder.forward(arr.reshape(1, -1) if single else arr).data
    return out[0] if single else out


def classify(head: ClassifierHead, embedding) -> np.ndarray:
    """Logits for a single embedding (or a batch of rows)."""
    arr = np.asarray(embedding, dtype=np.float64)
    single = arr.ndim == 1
    out = head.forward(arr.reshape(1, -1) if single else arr).data
    return out[0] if single else out


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    t = ad.as_tensor(logits)
    if t.data.ndim != 2 or t.data.shape[0] < 1:
        raise InvalidInputError("cross_entropy_loss expects a (B, C) logit matrix")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (t.data.shape[0],):
        raise InvalidInputError("labels must be one class index per row")
    if (y < 0).any() or (y >= t.data.shape[1]).any():
        raise InvalidInputError("label index out of range")
    log_probs = ad.log_softmax(t, axis=1)
    return -(ad.take_rows(log_probs, y).mean())
