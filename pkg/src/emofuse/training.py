"""Three-phase optimization: teacher, distilled students, fusion.

All phases share one loop shape: seeded init, per-epoch seeded shuffling,
AdamW steps under a linear warmup/decay schedule, a dev evaluation after
every epoch (plus one at initialization) and best-on-dev selection. The
finite-difference gradient checker used by tests and the `gradcheck` command
also lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import (
    DatasetSplit,
    FeatureRecord,
    MODALITIES,
    labels_of,
    make_batches,
    modality_matrix,
)
from .distillation import (
    DistillBatch,
    KDConfig,
    feature_loss,
    response_loss,
    student_objective,
)
from .encoders import ClassifierHead, StubEncoder, cross_entropy_loss
from .errors import ConfigurationError, DependencyError, InvalidInputError
from .evaluation import weighted_f1
from .fusion import FusionConfig, FusionParams, fuse_batch

# Stable stream tags so every phase/modality draws from its own substream.
_PHASE_TAGS = {
    "teacher": 1,
    "student-text": 2,
    "student-audio": 3,
    "student-visual": 4,
    "fusion": 5,
    "concat": 6,
}


@dataclass
class TrainConfig:
    """Everything the three training phases need besides the data itself."""

    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    epochs_teacher: int = 12
    epochs_students: int = 12
    epochs_fusion: int = 12
    embed_dim: int = 32
    teacher_modality: str = "text"
    selection_metric: str = "weighted_f1"
    seed: int = 0
    kd: KDConfig = field(default_factory=KDConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigurationError("warmup_frac must lie in [0, 1]")
        if self.teacher_modality not in MODALITIES:
            raise ConfigurationError(
                f"teacher_modality must be one of {MODALITIES}")

    def student_modalities(self) -> list[str]:
        return [m for m in MODALITIES if m != self.teacher_modality]


# -- optimizer ------------------------------------------------------------------


def learning_rate_at(step: int, total_steps: int, warmup_frac: float,
                     peak: float) -> float:
    """Linear warmup to `peak`, then linear decay to zero at `total_steps`.

    `step` is 1-based; with warmup_frac 0.1 and 100 total steps, step 10 is
    exactly the peak and step 100 is exactly zero.
    """
    if total_steps <= 0:
        return peak
    warmup_steps = int(round(warmup_frac * total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup_steps)


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                 v: np.ndarray, step: int, lr: float, beta1: float,
                 beta2: float, eps: float, weight_decay: float) -> None:
    """One decoupled-weight-decay adaptive update, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """Decoupled-weight-decay Adam over a list of parameter tensors, driven by
    the linear warmup/decay schedule."""

    def __init__(self, params: list[Tensor], peak_lr: float, total_steps: int,
                 warmup_frac: float = 0.1, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.peak_lr = peak_lr
        self.total_steps = total_steps
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data))
                        for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        self.step_count += 1
        lr = learning_rate_at(self.step_count, self.total_steps,
                              self.warmup_frac, self.peak_lr)
        for p, (m, v) in zip(self.params, self.moments):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if grad.shape != p.data.shape:
                raise InvalidInputError("gradient/parameter shape mismatch")
            adamw_update(p.data, grad, m, v, self.step_count, lr,
                         self.beta1, self.beta2, self.eps, self.weight_decay)
        return lr


def optimizer_step(params: list[Tensor], grads: list[np.ndarray],
                   optimizer: AdamW) -> None:
    """Functional form of one optimizer step with explicit gradients."""
    if len(params) != len(grads):
        raise InvalidInputError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if np.asarray(g).shape != p.data.shape:
            raise InvalidInputError("gradient/parameter shape mismatch")
        p.grad = np.asarray(g, dtype=np.float64)
    optimizer.step()
    optimizer.zero_grad()


# -- bookkeeping ------------------------------------------------------------------


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    dev_loss: float
    dev_f1: float


@dataclass
class TrainedEncoder:
    modality: str
    encoder: StubEncoder
    head: ClassifierHead
    history: list[EpochRecord]
    best_epoch: int
    best_dev_f1: float

    def state(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state().items()}
        out.update({f"head.{k}": v for k, v in self.head.state().items()})
        return out

    @classmethod
    def from_state(cls, modality: str, state: dict[str, np.ndarray]) -> "TrainedEncoder":
        enc = StubEncoder.from_state(
            modality, {k.split(".", 1)[1]: v for k, v in state.items()
                       if k.startswith("encoder.")})
        head = ClassifierHead.from_state(
            {k.split(".", 1)[1]: v for k, v in state.items()
             if k.startswith("head.")})
        return cls(modality=modality, encoder=enc, head=head, history=[],
                   best_epoch=0, best_dev_f1=float("nan"))


@dataclass
class TrainedFusion:
    kind: str                      # "asf" or "concat"
    params: FusionParams | None    # asf
    concat_head: ClassifierHead | None
    student_order: list[str]
    history: list[EpochRecord]
    best_epoch: int
    best_dev_f1: float
    concat_dropout: float = 0.0


def _phase_rngs(seed: int, tag: int):
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, tag, 11]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, tag, 7]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, tag, 13]))
    return init_rng, shuffle_rng, dropout_rng


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def evaluate_encoder(encoder: StubEncoder, head: ClassifierHead,
                     features: np.ndarray, labels: np.ndarray):
    logits = head.forward(encoder.forward(Tensor(features)))
    loss = float(cross_entropy_loss(logits, labels).data)
    preds = logits.data.argmax(axis=1)
    return loss, weighted_f1(preds, labels, head.num_classes), preds


def _train_encoder_phase(split: DatasetSplit, cfg: TrainConfig, modality: str,
                         epochs: int, phase: str,
                         teacher: TrainedEncoder | None = None,
                         kd: KDConfig | None = None) -> TrainedEncoder:
    """Shared loop behind teacher training and student distillation."""
    if not split.train:
        raise ConfigurationError("training split is empty")
    tag = _PHASE_TAGS[f"{phase}-{modality}" if phase == "student" else phase]
    init_rng, shuffle_rng, _ = _phase_rngs(cfg.seed, tag)
    num_classes = split.schema.num_classes
    encoder = StubEncoder.init(modality, split.schema.dim(modality),
                               cfg.embed_dim, init_rng)
    head = ClassifierHead.init(cfg.embed_dim, num_classes, init_rng)
    params = encoder.parameters() + head.parameters()

    dev_x = modality_matrix(split.dev, modality)
    dev_y = labels_of(split.dev)

    teacher_logits = teacher_reprs = None
    if teacher is not None and kd is not None and (kd.alpha > 0 or kd.beta > 0):
        # The teacher is frozen, so its outputs on the training set are
        # precomputed once and indexed per batch.
        train_teacher_x = modality_matrix(split.train, teacher.modality)
        teacher_reprs = teacher.encoder.forward(Tensor(train_teacher_x)).data
        teacher_logits = teacher.head.forward(Tensor(teacher_reprs)).data

    index_of = {id(r): i for i, r in enumerate(split.train)}
    train_x = modality_matrix(split.train, modality)
    train_y = labels_of(split.train)

    steps_per_epoch = len(make_batches(split.train, cfg.batch_size, seed=0))
    optimizer = AdamW(params, cfg.learning_rate, epochs * steps_per_epoch,
                      cfg.warmup_frac, cfg.weight_decay)

    history: list[EpochRecord] = []
    dev_loss, dev_f1, _ = evaluate_encoder(encoder, head, dev_x, dev_y)
    history.append(EpochRecord(phase=f"{phase}-{modality}", epoch=0,
                               train_loss=float("nan"), dev_loss=dev_loss,
                               dev_f1=dev_f1))
    best_f1, best_epoch, best_state = dev_f1, 0, _snapshot(params)

    for epoch in range(1, epochs + 1):
        shuffle_seed = int(shuffle_rng.integers(0, 2 ** 63))
        epoch_losses = []
        for batch in make_batches(split.train, cfg.batch_size, shuffle_seed):
            rows = np.array([index_of[id(r)] for r in batch])
            x = Tensor(train_x[rows])
            y = train_y[rows]
            reprs = encoder.forward(x)
            logits = head.forward(reprs)
            if teacher_logits is not None:
                dbatch = DistillBatch(
                    student_logits=logits, teacher_logits=teacher_logits[rows],
                    student_reprs=reprs, teacher_reprs=teacher_reprs[rows],
                    labels=y)
                loss, _ = student_objective(dbatch, kd)
            else:
                loss = cross_entropy_loss(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.data))
        dev_loss, dev_f1, _ = evaluate_encoder(encoder, head, dev_x, dev_y)
        history.append(EpochRecord(phase=f"{phase}-{modality}", epoch=epoch,
                                   train_loss=float(np.mean(epoch_losses)),
                                   dev_loss=dev_loss, dev_f1=dev_f1))
        if dev_f1 > best_f1:
            best_f1, best_epoch, best_state = dev_f1, epoch, _snapshot(params)

    _restore(params, best_state)
    return TrainedEncoder(modality=modality, encoder=encoder, head=head,
                          history=history, best_epoch=best_epoch,
                          best_dev_f1=best_f1)


def train_teacher(split: DatasetSplit, cfg: TrainConfig,
                  modality: str | None = None) -> TrainedEncoder:
    """Train the teacher encoder + head with cross-entropy; best-on-dev."""
    modality = modality or cfg.teacher_modality
    return _train_encoder_phase(split, cfg, modality, cfg.epochs_teacher,
                                phase="teacher")


def train_student(split: DatasetSplit, cfg: TrainConfig, modality: str,
                  teacher: TrainedEncoder | None = None,
                  kd: KDConfig | None = None) -> TrainedEncoder:
    """Train one student; with a teacher and active balance factors the
    combined distillation objective applies, otherwise plain cross-entropy.

    Each student modality draws from its own seed substream, so training one
    student alone produces the same weights as training it alongside others.
    """
    kd = kd if kd is not None else cfg.kd
    if teacher is None and (kd.alpha > 0 or kd.beta > 0):
        raise DependencyError("distillation requires a trained teacher")
    return _train_encoder_phase(split, cfg, modality, cfg.epochs_students,
                                phase="student", teacher=teacher, kd=kd)


def distill_students(split: DatasetSplit, teacher: TrainedEncoder,
                     cfg: TrainConfig,
                     kd: KDConfig | None = None) -> dict[str, TrainedEncoder]:
    """Train both student encoders against the frozen teacher."""
    if teacher is None:
        raise DependencyError("distillation requires a trained teacher")
    return {
        modality: train_student(split, cfg, modality, teacher=teacher, kd=kd)
        for modality in MODALITIES if modality != teacher.modality
    }


def _precompute_embeddings(split: DatasetSplit, model: TrainedEncoder):
    out = {}
    for name in ("train", "dev", "test"):
        x = modality_matrix(split.records(name), model.modality)
        out[name] = model.encoder.forward(Tensor(x)).data
    return out


def evaluate_fusion(result: TrainedFusion, teacher_emb: np.ndarray,
                    student_embs: list[np.ndarray], labels: np.ndarray):
    logits, trace = _fusion_forward(result, Tensor(teacher_emb),
                                    [Tensor(e) for e in student_embs],
                                    train=False, dropout_rng=None)
    loss = float(cross_entropy_loss(logits, labels).data)
    preds = logits.data.argmax(axis=1)
    num_classes = logits.data.shape[1]
    scale = trace.scale if trace is not None else None
    return loss, weighted_f1(preds, labels, num_classes), preds, scale


def _fusion_forward(result: TrainedFusion, teacher_emb: Tensor,
                    student_embs: list[Tensor], train: bool, dropout_rng):
    if result.kind == "asf":
        logits, trace = fuse_batch(teacher_emb, student_embs, result.params,
                                   train=train, dropout_rng=dropout_rng)
        return logits, trace
    stacked = ad.concat([teacher_emb] + student_embs, axis=1)
    if train and result.concat_dropout > 0.0:
        keep = (dropout_rng.random(stacked.data.shape) >= result.concat_dropout)
        stacked = stacked * Tensor(keep / (1.0 - result.concat_dropout))
    return result.concat_head.forward(stacked), None


def train_fusion(split: DatasetSplit, teacher: TrainedEncoder,
                 students: dict[str, TrainedEncoder], cfg: TrainConfig,
                 mode: str = "asf") -> TrainedFusion:
    """Train the fusion stage over frozen encoders; best-on-dev.

    mode "asf" trains the attention/gate/displacement/classifier stack;
    mode "concat" trains a plain affine classifier on the concatenated
    teacher+student embeddings (the no-fusion baseline).
    """
    if teacher is None:
        raise DependencyError("fusion requires a trained teacher")
    if not students:
        raise DependencyError("fusion requires at least one trained student")
    if mode not in ("asf", "concat"):
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    student_order = [m for m in MODALITIES if m in students]
    tag = _PHASE_TAGS["fusion" if mode == "asf" else "concat"]
    init_rng, shuffle_rng, dropout_rng = _phase_rngs(cfg.seed, tag)
    num_classes = split.schema.num_classes

    teacher_embs = _precompute_embeddings(split, teacher)
    student_embs = {m: _precompute_embeddings(split, students[m])
                    for m in student_order}

    if mode == "asf":
        params = FusionParams.init(cfg.embed_dim, num_classes, cfg.fusion,
                                   init_rng, classifier=teacher.head,
                                   num_students=len(student_order))
        result = TrainedFusion(kind="asf", params=params, concat_head=None,
                               student_order=student_order, history=[],
                               best_epoch=0, best_dev_f1=float("nan"))
        trainable = params.parameters()
    else:
        concat_dim = cfg.embed_dim * (1 + len(student_order))
        head = ClassifierHead.init(concat_dim, num_classes, init_rng)
        result = TrainedFusion(kind="concat", params=None, concat_head=head,
                               student_order=student_order, history=[],
                               best_epoch=0, best_dev_f1=float("nan"))
        trainable = head.parameters()
    result.concat_dropout = cfg.fusion.dropout

    labels = {name: labels_of(split.records(name))
              for name in ("train", "dev", "test")}
    index_of = {id(r): i for i, r in enumerate(split.train)}

    steps_per_epoch = len(make_batches(split.train, cfg.batch_size, seed=0))
    optimizer = AdamW(trainable, cfg.learning_rate,
                      cfg.epochs_fusion * steps_per_epoch,
                      cfg.warmup_frac, cfg.weight_decay)

    def dev_metrics():
        return evaluate_fusion(result, teacher_embs["dev"],
                               [student_embs[m]["dev"] for m in student_order],
                               labels["dev"])

    dev_loss, dev_f1, _, _ = dev_metrics()
    result.history.append(EpochRecord(phase=f"fusion-{mode}", epoch=0,
                                      train_loss=float("nan"),
                                      dev_loss=dev_loss, dev_f1=dev_f1))
    best_f1, best_epoch, best_state = dev_f1, 0, _snapshot(trainable)

    for epoch in range(1, cfg.epochs_fusion + 1):
        shuffle_seed = int(shuffle_rng.integers(0, 2 ** 63))
        epoch_losses = []
        for batch in make_batches(split.train, cfg.batch_size, shuffle_seed):
            rows = np.array([index_of[id(r)] for r in batch])
            t_emb = Tensor(teacher_embs["train"][rows])
            s_embs = [Tensor(student_embs[m]["train"][rows])
                      for m in student_order]
            logits, _ = _fusion_forward(result, t_emb, s_embs, train=True,
                                        dropout_rng=dropout_rng)
            loss = cross_entropy_loss(logits, labels["train"][rows])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.data))
        dev_loss, dev_f1, _, _ = dev_metrics()
        result.history.append(EpochRecord(phase=f"fusion-{mode}", epoch=epoch,
                                          train_loss=float(np.mean(epoch_losses)),
                                          dev_loss=dev_loss, dev_f1=dev_f1))
        if dev_f1 > best_f1:
            best_f1, best_epoch, best_state = dev_f1, epoch, _snapshot(trainable)

    _restore(trainable, best_state)
    result.best_epoch, result.best_dev_f1 = best_epoch, best_f1
    return result


# -- gradient checking -----------------------------------------------------------

GRADCHECK_LOSSES = ("cross_entropy", "response_loss", "feature_loss", "fused")


def central_difference(fn, arr: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of
    ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        upper = fn()
        flat[i] = keep - step
        lower = fn()
        flat[i] = keep
        gflat[i] = (upper - lower) / (2.0 * step)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _gradcheck_case(loss_id: str, seed: int):
    """Build (tensors to differentiate, closure returning the scalar Tensor)."""
    rng = np.random.default_rng(np.random.SeedSequence([loss_id_tag(loss_id), seed]))
    if loss_id == "cross_entropy":
        logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        labels = rng.integers(0, 4, size=5)
        return [logits], lambda: cross_entropy_loss(logits, labels)
    if loss_id == "response_loss":
        zs = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        zt = rng.standard_normal((4, 3))
        return [zs], lambda: response_loss(zs, zt, tau=2.0)
    if loss_id == "feature_loss":
        fs = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        ft = rng.standard_normal((4, 5))
        return [fs], lambda: feature_loss(fs, ft, tau=1.0)
    if loss_id == "fused":
        d, classes, batch = 6, 3, 2
        params = FusionParams.init(
            d, classes, FusionConfig(heads=2, theta=0.5, dropout=0.0), rng)
        teacher = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        audio = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        visual = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        labels = rng.integers(0, classes, size=batch)
        tensors = [teacher, audio, visual] + params.parameters()

        def run():
            logits, _ = fuse_batch(teacher, [audio, visual], params, train=False)
            return cross_entropy_loss(logits, labels)

        return tensors, run
    raise ConfigurationError(f"unknown gradcheck loss id {loss_id!r}")


def loss_id_tag(loss_id: str) -> int:
    try:
        return GRADCHECK_LOSSES.index(loss_id)
    except ValueError:
        raise ConfigurationError(f"unknown gradcheck loss id {loss_id!r}") from None


@dataclass
class GradCheckReport:
    loss_id: str
    seeds: list[int]
    per_seed: list[float]
    max_rel_err: float


def gradient_check(loss_id: str, seeds=20, step: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``seeds`` is either a count (checks seeds 0..n-1) or an explicit list.
    The reported relative error uses denominator max(|a|, |n|, 1e-8).
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    per_seed = []
    for seed in seed_list:
        tensors, fn = _gradcheck_case(loss_id, seed)
        for t in tensors:
            t.grad = None
        out = fn()
        out.backward()
        worst = 0.0
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = central_difference(lambda: float(fn().data), t.data, step)
            worst = max(worst, _relative_error(analytic, numeric))
        per_seed.append(worst)
    return GradCheckReport(loss_id=loss_id, seeds=seed_list, per_seed=per_seed,
                           max_rel_err=max(per_seed))
