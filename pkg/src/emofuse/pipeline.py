"""End-to-end orchestration: dataset preparation, per-cell pipeline runs and
checkpoint glue shared by the CLI, the ablation runner and the test suite."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor
from .config import RunConfig
from .dataset import DatasetSplit, generate, labels_of, load_features, modality_matrix
from .distillation import KDConfig
from .encoders import cross_entropy_loss
from .errors import ConfigurationError, DependencyError
from .evaluation import EvalReport, GridCell, build_report, derive_cell_seed
from .fusion import FusionParams
from .training import (
    TrainedEncoder,
    TrainedFusion,
    distill_students,
    evaluate_fusion,
    train_fusion,
    train_student,
    train_teacher,
)


def prepare_dataset(cfg: RunConfig) -> DatasetSplit:
    """Synthesize the dataset described by the config's generator section."""
    return generate(cfg.data)


def dataset_from_file_or_config(cfg: RunConfig) -> DatasetSplit:
    """Load the configured feature file if it exists, else raise: commands that
    consume data require `gen-data` (or a user-supplied file) to have run."""
    path = Path(cfg.paths.data_file)
    if not path.exists():
        raise DependencyError(f"missing feature file: expected {path}")
    return load_features(path)


def effective_kd(kd: KDConfig, use_response: bool, use_feature: bool) -> KDConfig:
    return KDConfig(alpha=kd.alpha if use_response else 0.0,
                    beta=kd.beta if use_feature else 0.0,
                    tau_response=kd.tau_response, tau_feature=kd.tau_feature)


def evaluate_encoder_report(model: TrainedEncoder, data: DatasetSplit,
                            split: str) -> EvalReport:
    records = data.records(split)
    x = modality_matrix(records, model.modality)
    y = labels_of(records)
    logits = model.head.forward(model.encoder.forward(Tensor(x)))
    loss = float(cross_entropy_loss(logits, y).data)
    preds = logits.data.argmax(axis=1)
    return build_report(preds, y, data.schema.num_classes, loss=loss)


def evaluate_fusion_report(result: TrainedFusion, teacher: TrainedEncoder,
                           students: dict[str, TrainedEncoder],
                           data: DatasetSplit, split: str) -> EvalReport:
    records = data.records(split)
    y = labels_of(records)
    t_emb = teacher.encoder.forward(
        Tensor(modality_matrix(records, teacher.modality))).data
    s_embs = [students[m].encoder.forward(
        Tensor(modality_matrix(records, m))).data for m in result.student_order]
    loss, _, preds, scales = evaluate_fusion(result, t_emb, s_embs, y)
    return build_report(preds, y, data.schema.num_classes, loss=loss,
                        scales=scales)


def run_cell(data: DatasetSplit, base: RunConfig, cell: GridCell,
             run_seed: int) -> EvalReport:
    """Train whatever the cell requires and evaluate it on the test split.

    Single-modality cells evaluate that encoder alone (students keep whatever
    distillation the toggles allow); multi-modality cells train fusion over
    the cell's students, with `asf=False` selecting the concatenation baseline.
    """
    seed = derive_cell_seed(base.seed, cell.key, run_seed)
    cfg = dataclasses.replace(base.train, seed=seed,
                              teacher_modality=cell.teacher,
                              kd=base.train.kd, fusion=base.train.fusion)
    kd = effective_kd(cfg.kd, cell.use_response, cell.use_feature)
    modalities = tuple(cell.modalities)

    if modalities == (cell.teacher,):
        teacher = train_teacher(data, cfg)
        return evaluate_encoder_report(teacher, data, "test")

    kd_active = kd.alpha > 0 or kd.beta > 0
    if len(modalities) == 1:
        # A single non-teacher modality: evaluate that student alone.
        teacher = train_teacher(data, cfg) if kd_active else None
        student = train_student(data, cfg, modalities[0], teacher=teacher, kd=kd)
        return evaluate_encoder_report(student, data, "test")

    if cell.teacher not in modalities:
        raise ConfigurationError(
            f"cell {cell.key!r}: fusion cells must include the teacher modality")
    teacher = train_teacher(data, cfg)
    students = {
        m: train_student(data, cfg, m, teacher=teacher if kd_active else None,
                         kd=kd)
        for m in modalities if m != cell.teacher
    }
    fusion = train_fusion(data, teacher, students, cfg,
                          mode="asf" if cell.asf else "concat")
    return evaluate_fusion_report(fusion, teacher, students, data, "test")


# -- checkpoint glue -------------------------------------------------------------


def save_encoder(path, trained: TrainedEncoder, kind: str, meta: dict) -> None:
    meta = dict(meta)
    meta.update({
        "modality": trained.modality,
        "best_epoch": trained.best_epoch,
        "best_dev_f1": trained.best_dev_f1,
    })
    ckpt.save_checkpoint(path, kind, trained.state(), meta)


def load_encoder(path, expected_kind: str | None = None) -> tuple[TrainedEncoder, dict]:
    kind, arrays, meta = ckpt.load_checkpoint(path)
    if expected_kind is not None and kind != expected_kind:
        raise DependencyError(
            f"{path} holds a {kind!r} checkpoint, expected {expected_kind!r}")
    trained = TrainedEncoder.from_state(meta["modality"], arrays)
    trained.best_epoch = meta.get("best_epoch", 0)
    return trained, meta


def save_fusion(path, result: TrainedFusion, meta: dict) -> None:
    meta = dict(meta)
    meta.update({
        "fusion_kind": result.kind,
        "student_order": list(result.student_order),
        "best_epoch": result.best_epoch,
        "best_dev_f1": result.best_dev_f1,
    })
    if result.kind == "asf":
        arrays = result.params.state()
        meta.update({
            "theta": result.params.theta,
            "heads": result.params.heads,
            "dropout": result.params.dropout,
            "num_students": result.params.num_students,
        })
    else:
        arrays = {f"concat_head.{k}": v
                  for k, v in result.concat_head.state().items()}
        meta["dropout"] = result.concat_dropout
    ckpt.save_checkpoint(path, "fusion", arrays, meta)


def load_fusion(path) -> tuple[TrainedFusion, dict]:
    kind, arrays, meta = ckpt.load_checkpoint(path)
    if kind != "fusion":
        raise DependencyError(f"{path} holds a {kind!r} checkpoint, expected 'fusion'")
    if meta["fusion_kind"] == "asf":
        params = FusionParams.from_state(
            arrays, theta=meta["theta"], heads=meta["heads"],
            dropout=meta["dropout"], num_students=meta["num_students"])
        result = TrainedFusion(kind="asf", params=params, concat_head=None,
                               student_order=list(meta["student_order"]),
                               history=[], best_epoch=meta.get("best_epoch", 0),
                               best_dev_f1=meta.get("best_dev_f1", float("nan")))
    else:
        from .encoders import ClassifierHead
        head = ClassifierHead.from_state(
            {k.split(".", 1)[1]: v for k, v in arrays.items()})
        result = TrainedFusion(kind="concat", params=None, concat_head=head,
                               student_order=list(meta["student_order"]),
                               history=[], best_epoch=meta.get("best_epoch", 0),
                               best_dev_f1=meta.get("best_dev_f1", float("nan")),
                               concat_dropout=meta.get("dropout", 0.0))
    return result, meta
