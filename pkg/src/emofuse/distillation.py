"""Cross-modal distillation losses and the combined student objective.

Two losses transfer knowledge from the (frozen) teacher to a student:

* a response loss that matches the student's tempered prediction matrix to
  the teacher's through Pearson distance, once across each batch row
  (inter-class structure) and once across each class column (intra-class
  structure), each scaled by tau^2 and averaged;
* a feature loss that aligns the student->teacher similarity distribution
  with the teacher's own self-similarity distribution via KL divergence over
  row-normalized representations.

Teacher inputs always enter as constants: gradients flow to the student only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import cross_entropy_loss
from .errors import (
    DegenerateRepresentationError,
    InvalidInputError,
    InvalidParameterError,
)
from .numerics import EPS_PROB

_LOG_EPS_PROB = float(np.log(EPS_PROB))


@dataclass
class KDConfig:
    """Balance factors and temperatures for the combined student objective."""

    alpha: float = 1.0
    beta: float = 1.0
    tau_response: float = 2.0
    tau_feature: float = 1.0

    def __post_init__(self):
        if self.tau_response <= 0 or self.tau_feature <= 0:
            raise InvalidParameterError("distillation temperatures must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParameterError("balance factors must be >= 0")


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau!r}")
    return float(tau)


def _teacher_constant(x) -> np.ndarray:
    # Teacher-side inputs are constants by contract, whatever the caller passed.
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def response_loss(student_logits, teacher_logits, tau: float) -> Tensor:
    """Pearson-distance response distillation over softened prediction matrices.

    Both matrices are (B, C) with B >= 2 and C >= 2. Rows and columns of the
    softened matrices are compared separately and each mean is scaled by
    tau^2 to compensate the gradient shrinkage the temperature introduces.
    """
    tau = _check_tau(tau)
    zs = ad.as_tensor(student_logits)
    zt = _teacher_constant(teacher_logits)
    if zs.data.ndim != 2 or zs.data.shape != zt.shape:
        raise InvalidInputError("logit matrices must be 2-D and equal shape")
    batch, classes = zs.data.shape
    if batch < 2 or classes < 2:
        raise InvalidInputError(
            "response_loss needs B >= 2 and C >= 2 for row/column correlations")
    ys = ad.softmax(zs, tau=tau, axis=1)
    yt = Tensor(_row_softmax(zt, tau))
    inter = ad.pearson_rows(ys, yt).sum() * (tau * tau / batch)
    intra = ad.pearson_rows(ys.T, yt.T).sum() * (tau * tau / classes)
    return inter + intra


def _row_softmax(z: np.ndarray, tau: float) -> np.ndarray:
    s = z / tau
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def feature_loss(student_reprs, teacher_reprs, tau: float) -> Tensor:
    """KL alignment of similarity distributions over L2-normalized rows.

    The target distribution comes from the teacher's self-similarity matrix;
    the student distribution from the student-vs-teacher similarity matrix.
    A zero-norm representation row cannot be normalized and raises
    DegenerateRepresentationError.
    """
    tau = _check_tau(tau)
    fs = ad.as_tensor(student_reprs)
    ft = _teacher_constant(teacher_reprs)
    if fs.data.ndim != 2 or fs.data.shape != ft.shape:
        raise InvalidInputError("representation matrices must be 2-D and equal shape")
    batch = fs.data.shape[0]
    if batch < 2:
        raise InvalidInputError("feature_loss needs B >= 2")

    student_norms = np.linalg.norm(fs.data, axis=1)
    teacher_norms = np.linalg.norm(ft, axis=1)
    if (student_norms < 1e-30).any() or (teacher_norms < 1e-30).any():
        raise DegenerateRepresentationError(
            "cannot L2-normalize a zero-norm representation row")

    ft_hat = ft / teacher_norms[:, None]
    target = _row_softmax(ft_hat @ ft_hat.T, tau)
    log_target = np.log(np.maximum(target, EPS_PROB))

    fs_hat = fs / ad.l2_norm(fs, axis=1, keepdims=True)
    similarity = fs_hat @ Tensor(ft_hat.T)
    log_student = ad.clamp_min(ad.log_softmax(similarity, tau=tau, axis=1),
                               _LOG_EPS_PROB)
    kl_total = (Tensor(target) * (Tensor(log_target) - log_student)).sum()
    return kl_total * (1.0 / batch)


def student_loss(cls_loss, resp_loss, feat_loss, cfg: KDConfig):
    """Combined objective: classification + alpha*response + beta*feature."""
    return cls_loss + cfg.alpha * resp_loss + cfg.beta * feat_loss


@dataclass
class DistillBatch:
    """One batch of student outputs plus frozen teacher outputs and labels."""

    student_logits: Tensor
    teacher_logits: np.ndarray
    student_reprs: Tensor
    teacher_reprs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.teacher_logits = _teacher_constant(self.teacher_logits)
        self.teacher_reprs = _teacher_constant(self.teacher_reprs)
        batch, classes = self.student_logits.data.shape
        if batch < 2 or classes < 2:
            raise InvalidInputError("distillation batches need B >= 2 and C >= 2")
        if self.teacher_logits.shape != (batch, classes):
            raise InvalidInputError("teacher/student logit shapes differ")
        if self.student_reprs.data.shape != self.teacher_reprs.shape:
            raise InvalidInputError("teacher/student representation shapes differ")
        if self.labels.shape != (batch,):
            raise InvalidInputError("labels must be one class index per row")


def student_objective(batch: DistillBatch, cfg: KDConfig):
    """Total student loss for one batch, with its components.

    Zero-weighted distillation terms are skipped entirely, so alpha = beta = 0
    reduces bit-for-bit to plain cross-entropy training.
    """
    cls = cross_entropy_loss(batch.student_logits, batch.labels)
    parts = {"cls": float(cls.data), "response": 0.0, "feature": 0.0}
    total = cls
    if cfg.alpha > 0:
        resp = response_loss(batch.student_logits, batch.teacher_logits,
                             cfg.tau_response)
        parts["response"] = float(resp.data)
        total = total + cfg.alpha * resp
    if cfg.beta > 0:
        feat = feature_loss(batch.student_reprs, batch.teacher_reprs,
                            cfg.tau_feature)
        parts["feature"] = float(feat.data)
        total = total + cfg.beta * feat
    return total, parts
