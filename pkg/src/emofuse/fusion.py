"""Attention-based modality shifting fusion.

The student embeddings form a short token sequence run through multi-head
self-attention; the flattened result is gated against the teacher embedding
(ReLU gate) and turned into a displacement vector that is added to the
teacher embedding, with the displacement magnitude clamped relative to the
teacher norm:

    gate         = relu([teacher ; attended] @ Wg + bg)
    displacement = gate * (attended @ Wd + bd)
    scale        = min(theta * ||teacher|| / ||displacement||, 1)
    fused        = teacher + scale * displacement

The teacher never enters the attention stack; it only anchors the shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ClassifierHead, xavier_uniform
from .errors import InvalidInputError, InvalidParameterError
from .numerics import AttentionParams, multi_head_self_attention

EPS_NORM = 1e-12


@dataclass
class FusionConfig:
    """Hyperparameters of the fusion stage."""

    heads: int = 4
    theta: float = 0.1
    dropout: float = 0.1

    def __post_init__(self):
        if self.theta <= 0:
            raise InvalidParameterError("theta must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParameterError("dropout must lie in [0, 1)")
        if self.heads < 1:
            raise InvalidParameterError("heads must be >= 1")


@dataclass
class ShiftTrace:
    """Per-utterance fusion internals, kept for inspection and reporting."""

    attended: np.ndarray      # flattened attention output over student tokens
    gate: np.ndarray
    displacement: np.ndarray
    scale: float              # in [0, 1]
    fused: np.ndarray


class FusionParams:
    """All trainable state of the fusion stage."""

    def __init__(self, attention: AttentionParams, gate_w: Tensor, gate_b: Tensor,
                 disp_w: Tensor, disp_b: Tensor, classifier: ClassifierHead,
                 theta: float, heads: int, dropout: float, num_students: int = 2):
        if theta <= 0:
            raise InvalidParameterError("theta must be > 0")
        if not 0.0 <= dropout < 1.0:
            raise InvalidParameterError("dropout must lie in [0, 1)")
        self.attention = attention
        self.gate_w, self.gate_b = gate_w, gate_b
        self.disp_w, self.disp_b = disp_w, disp_b
        self.classifier = classifier
        self.theta = float(theta)
        self.heads = int(heads)
        self.dropout = float(dropout)
        self.num_students = int(num_students)
        d = self.embed_dim
        if gate_w.data.shape != ((1 + num_students) * d, d):
            raise InvalidInputError("gate weight shape inconsistent with dims")
        if disp_w.data.shape != (num_students * d, d):
            raise InvalidInputError("displacement weight shape inconsistent with dims")

    @property
    def embed_dim(self) -> int:
        return self.gate_w.data.shape[1]

    @classmethod
    def init(cls, embed_dim: int, num_classes: int, cfg: FusionConfig,
             rng: np.random.Generator, classifier: ClassifierHead | None = None,
             num_students: int = 2) -> "FusionParams":
        d, s = embed_dim, num_students
        head = classifier.copy() if classifier is not None \
            else ClassifierHead.init(d, num_classes, rng)
        return cls(
            attention=AttentionParams.init(d, rng),
            gate_w=Tensor(xavier_uniform(rng, (1 + s) * d, d), requires_grad=True),
            gate_b=Tensor(np.zeros(d), requires_grad=True),
            disp_w=Tensor(xavier_uniform(rng, s * d, d), requires_grad=True),
            disp_b=Tensor(np.zeros(d), requires_grad=True),
            classifier=head,
            theta=cfg.theta, heads=cfg.heads, dropout=cfg.dropout,
            num_students=s,
        )

    @classmethod
    def zeroed(cls, embed_dim: int, num_classes: int, cfg: FusionConfig,
               classifier: ClassifierHead | None = None,
               num_students: int = 2) -> "FusionParams":
        """Gate/displacement/attention all zero: fusion reduces to the teacher."""
        d, s = embed_dim, num_students
        head = classifier.copy() if classifier is not None else ClassifierHead(
            weight=Tensor(np.zeros((d, num_classes)), requires_grad=True),
            bias=Tensor(np.zeros(num_classes), requires_grad=True))
        return cls(
            attention=AttentionParams.zeros(d),
            gate_w=Tensor(np.zeros(((1 + s) * d, d)), requires_grad=True),
            gate_b=Tensor(np.zeros(d), requires_grad=True),
            disp_w=Tensor(np.zeros((s * d, d)), requires_grad=True),
            disp_b=Tensor(np.zeros(d), requires_grad=True),
            classifier=head,
            theta=cfg.theta, heads=cfg.heads, dropout=cfg.dropout,
            num_students=s,
        )

    def parameters(self) -> list[Tensor]:
        return (self.attention.parameters()
                + [self.gate_w, self.gate_b, self.disp_w, self.disp_b]
                + self.classifier.parameters())

    def state(self) -> dict[str, np.ndarray]:
        out = {f"attention.{k}": v for k, v in self.attention.state().items()}
        out.update({
            "gate_w": self.gate_w.data, "gate_b": self.gate_b.data,
            "disp_w": self.disp_w.data, "disp_b": self.disp_b.data,
            "classifier.weight": self.classifier.weight.data,
            "classifier.bias": self.classifier.bias.data,
        })
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], theta: float, heads: int,
                   dropout: float, num_students: int) -> "FusionParams":
        grad = lambda k: Tensor(state[k].copy(), requires_grad=True)
        attention = AttentionParams(
            wq=grad("attention.wq"), wk=grad("attention.wk"),
            wv=grad("attention.wv"), wo=grad("attention.wo"))
        head = ClassifierHead(weight=grad("classifier.weight"),
                              bias=grad("classifier.bias"))
        return cls(attention, grad("gate_w"), grad("gate_b"),
                   grad("disp_w"), grad("disp_b"), head,
                   theta=theta, heads=heads, dropout=dropout,
                   num_students=num_students)


@dataclass
class BatchTrace:
    """Fusion internals for a whole batch (rows align with the batch)."""

    attended: np.ndarray
    gate: np.ndarray
    displacement: np.ndarray
    scale: np.ndarray
    fused: np.ndarray

    def row(self, i: int) -> ShiftTrace:
        return ShiftTrace(attended=self.attended[i], gate=self.gate[i],
                          displacement=self.displacement[i],
                          scale=float(self.scale[i]), fused=self.fused[i])


def attend_students(student_embs, params: FusionParams) -> Tensor:
    """Run self-attention over the student embeddings of a batch.

    ``student_embs`` is a list of (B, d) arrays/tensors, one per student, in a
    fixed modality order. Returns the flattened (B, S*d) attention output.
    """
    embs = [ad.as_tensor(e) for e in student_embs]
    if len(embs) != params.num_students:
        raise InvalidInputError(
            f"expected {params.num_students} student embeddings, got {len(embs)}")
    d = params.embed_dim
    batch = embs[0].data.shape[0]
    for e in embs:
        if e.data.shape != (batch, d):
            raise InvalidInputError("student embeddings must all be (B, d)")
    tokens = ad.concat([e.reshape((batch, 1, d)) for e in embs], axis=1)
    attended = multi_head_self_attention(tokens, params.attention, params.heads)
    return attended.reshape((batch, len(embs) * d))


def _shift_batch(teacher_emb: Tensor, attended: Tensor, params: FusionParams):
    gate_in = ad.concat([teacher_emb, attended], axis=1)
    gate = ad.relu(gate_in @ params.gate_w + params.gate_b)
    displacement = gate * (attended @ params.disp_w + params.disp_b)
    teacher_norm = ad.l2_norm(teacher_emb, axis=1, keepdims=True)
    disp_norm = ad.l2_norm(displacement, axis=1, keepdims=True)
    # scale := 0 where the displacement is numerically zero, the unique
    # limit-consistent value (fused == teacher either way).
    alive = Tensor((disp_norm.data >= EPS_NORM).astype(np.float64))
    ratio = teacher_norm * params.theta / ad.clamp_min(disp_norm, EPS_NORM)
    scale = ad.clamp_max(ratio, 1.0) * alive
    fused = teacher_emb + scale * displacement
    return gate, displacement, scale, fused


def fuse_batch(teacher_emb, student_embs, params: FusionParams,
               train: bool = False, dropout_rng: np.random.Generator | None = None):
    """Full fusion forward for a batch: attention, shift, dropout, classifier.

    Returns (logits Tensor (B, C), BatchTrace). Dropout is applied to the
    fused vector only when ``train`` is set, using the explicit RNG stream.
    """
    ft = ad.as_tensor(teacher_emb)
    if ft.data.ndim != 2 or ft.data.shape[1] != params.embed_dim:
        raise InvalidInputError("teacher embeddings must be (B, d)")
    attended = attend_students(student_embs, params)
    gate, displacement, scale, fused = _shift_batch(ft, attended, params)
    classifier_in = fused
    if train and params.dropout > 0.0:
        if dropout_rng is None:
            raise InvalidInputError("training-mode fusion needs a dropout RNG")
        keep = (dropout_rng.random(fused.data.shape) >= params.dropout)
        classifier_in = fused * Tensor(keep / (1.0 - params.dropout))
    logits = params.classifier.forward(classifier_in)
    trace = BatchTrace(attended=attended.data, gate=gate.data,
                       displacement=displacement.data,
                       scale=scale.data[:, 0], fused=fused.data)
    return logits, trace


def nonverbal_attend(audio_emb, visual_emb, params: FusionParams) -> np.ndarray:
    """Attend over the [audio, visual] token pair of one utterance; returns the
    flattened 2d-vector (audio token first)."""
    a = np.asarray(audio_emb, dtype=np.float64)
    v = np.asarray(visual_emb, dtype=np.float64)
    if a.shape != v.shape or a.ndim != 1:
        raise InvalidInputError("nonverbal_attend expects two equal d-vectors")
    out = attend_students([a.reshape(1, -1), v.reshape(1, -1)], params)
    return out.data[0]


def shift(teacher_emb, attended, params: FusionParams) -> ShiftTrace:
    """Gate the attended non-verbal vector against the teacher embedding and
    shift the teacher embedding by the norm-clamped displacement."""
    ft = np.asarray(teacher_emb, dtype=np.float64)
    fa = np.asarray(attended, dtype=np.float64)
    if ft.ndim != 1 or fa.ndim != 1:
        raise InvalidInputError("shift expects single vectors")
    if fa.shape[0] != params.num_students * params.embed_dim:
        raise InvalidInputError(
            f"attended vector must have dim {params.num_students}*d")
    gate, displacement, scale, fused = _shift_batch(
        Tensor(ft.reshape(1, -1)), Tensor(fa.reshape(1, -1)), params)
    return ShiftTrace(attended=fa, gate=gate.data[0],
                      displacement=displacement.data[0],
                      scale=float(scale.data[0, 0]), fused=fused.data[0])


def fuse_and_classify(teacher_emb, audio_emb, visual_emb, params: FusionParams,
                      train: bool = False,
                      dropout_rng: np.random.Generator | None = None):
    """Fuse one utterance's three embeddings; returns (logits, ShiftTrace)."""
    ft = np.asarray(teacher_emb, dtype=np.float64).reshape(1, -1)
    fa = np.asarray(audio_emb, dtype=np.float64).reshape(1, -1)
    fv = np.asarray(visual_emb, dtype=np.float64).reshape(1, -1)
    logits, trace = fuse_batch(ft, [fa, fv], params, train=train,
                               dropout_rng=dropout_rng)
    return logits.data[0], trace.row(0)
