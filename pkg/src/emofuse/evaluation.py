"""Metrics (weighted F1, confusion matrices), evaluation reports and the
ablation grid runner.

The runner reproduces two table structures on synthetic data: a 4-row toggle
grid (fusion on/off crossed with the two distillation losses) and a 6-row
modality grid (each single modality, each text+non-verbal pair, and the full
triple), plus an optional teacher-modality study. Trend directions are
reported, never enforced, by the runner itself.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError

LAMBDA_HISTOGRAM_BINS = 10


def _validate_pred_labels(predictions, labels, num_classes: int):
    preds = np.asarray(predictions, dtype=np.int64)
    ys = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 1 or preds.shape != ys.shape or preds.size == 0:
        raise InvalidInputError(
            "predictions and labels must be equal-length non-empty vectors")
    if num_classes < 1:
        raise InvalidInputError("num_classes must be >= 1")
    for name, arr in (("predictions", preds), ("labels", ys)):
        if (arr < 0).any() or (arr >= num_classes).any():
            raise InvalidInputError(f"{name} contain entries outside [0, C)")
    return preds, ys


def per_class_f1(predictions, labels, num_classes: int):
    """Per-class F1 plus support counts. F1 is 0 for a class whose precision
    and recall denominators are both empty."""
    preds, ys = _validate_pred_labels(predictions, labels, num_classes)
    f1 = np.zeros(num_classes)
    support = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (ys == c)))
        fp = int(np.sum((preds == c) & (ys != c)))
        fn = int(np.sum((preds != c) & (ys == c)))
        support[c] = tp + fn
        denom = 2 * tp + fp + fn
        f1[c] = (2.0 * tp / denom) if denom > 0 else 0.0
    return f1, support


def weighted_f1(predictions, labels, num_classes: int) -> float:
    """Per-class F1 averaged with weights proportional to true-label support."""
    f1, support = per_class_f1(predictions, labels, num_classes)
    return float(np.sum(f1 * support) / support.sum())


def confusion_matrix(predictions, labels, num_classes: int):
    """(raw counts, row-normalized) confusion matrices; raw[i][j] counts true
    class i predicted as j. Rows without support stay all-zero when normalized."""
    preds, ys = _validate_pred_labels(predictions, labels, num_classes)
    raw = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(raw, (ys, preds), 1)
    sums = raw.sum(axis=1, keepdims=True)
    normalized = np.divide(raw, sums, out=np.zeros((num_classes, num_classes)),
                           where=sums > 0)
    return raw, normalized


@dataclass
class EvalReport:
    """Evaluation summary for one model on one split."""

    weighted_f1: float
    per_class_f1: list[float]
    support: list[int]
    confusion_raw: list[list[int]]
    confusion_normalized: list[list[float]]
    loss: float | None = None
    lambda_histogram: dict | None = None

    def to_dict(self) -> dict:
        return {
            "weighted_f1": self.weighted_f1,
            "per_class_f1": self.per_class_f1,
            "support": self.support,
            "confusion_raw": self.confusion_raw,
            "confusion_normalized": self.confusion_normalized,
            "loss": self.loss,
            "lambda_histogram": self.lambda_histogram,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def save_confusion_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            n = len(self.confusion_raw)
            writer.writerow(["true\\pred"] + [f"pred_{j}" for j in range(n)]
                            + [f"norm_pred_{j}" for j in range(n)])
            for i in range(n):
                writer.writerow(
                    [f"true_{i}"] + [str(v) for v in self.confusion_raw[i]]
                    + [repr(float(v)) for v in self.confusion_normalized[i]])


def lambda_histogram(scales: Sequence[float],
                     bins: int = LAMBDA_HISTOGRAM_BINS) -> dict:
    values = np.asarray(scales, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "mean": float(values.mean()) if values.size else 0.0,
        "count": int(values.size),
    }


def build_report(predictions, labels, num_classes: int,
                 loss: float | None = None,
                 scales: Sequence[float] | None = None) -> EvalReport:
    f1, support = per_class_f1(predictions, labels, num_classes)
    raw, normalized = confusion_matrix(predictions, labels, num_classes)
    return EvalReport(
        weighted_f1=float(np.sum(f1 * support) / support.sum()),
        per_class_f1=[float(v) for v in f1],
        support=[int(s) for s in support],
        confusion_raw=[[int(v) for v in row] for row in raw],
        confusion_normalized=[[float(v) for v in row] for row in normalized],
        loss=loss,
        lambda_histogram=None if scales is None else lambda_histogram(scales),
    )


# -- ablation grids ---------------------------------------------------------------


@dataclass
class GridCell:
    """One configuration of the pipeline to train and evaluate.

    ``modalities`` selects what gets evaluated: the single teacher modality
    (teacher alone), one non-verbal modality (that student alone, trained with
    whatever distillation the toggles allow), or several modalities (fusion).
    ``asf`` switches between shifting fusion and the concatenation baseline.
    """

    key: str
    modalities: tuple[str, ...] = ("text", "audio", "visual")
    teacher: str = "text"
    asf: bool = True
    use_response: bool = True
    use_feature: bool = True

    @classmethod
    def from_dict(cls, obj: dict) -> "GridCell":
        try:
            key = obj["key"]
        except KeyError:
            raise ConfigurationError("grid cell missing 'key'") from None
        cell = cls(
            key=str(key),
            modalities=tuple(obj.get("modalities", ("text", "audio", "visual"))),
            teacher=str(obj.get("teacher", "text")),
            asf=bool(obj.get("asf", True)),
            use_response=bool(obj.get("use_response", True)),
            use_feature=bool(obj.get("use_feature", True)),
        )
        from .dataset import MODALITIES
        if cell.teacher not in MODALITIES:
            raise ConfigurationError(f"cell {key!r}: unknown teacher {cell.teacher!r}")
        if not cell.modalities or any(m not in MODALITIES for m in cell.modalities):
            raise ConfigurationError(f"cell {key!r}: bad modality subset")
        if len(set(cell.modalities)) != len(cell.modalities):
            raise ConfigurationError(f"cell {key!r}: duplicate modalities")
        return cell


def default_grid_spec() -> dict:
    """The 4-row toggle grid plus the 6-row modality grid."""
    cells = [
        {"key": "toggles/concat_no_kd", "asf": False,
         "use_response": False, "use_feature": False},
        {"key": "toggles/asf_no_kd", "asf": True,
         "use_response": False, "use_feature": False},
        {"key": "toggles/asf_response", "asf": True,
         "use_response": True, "use_feature": False},
        {"key": "toggles/asf_response_feature", "asf": True,
         "use_response": True, "use_feature": True},
        {"key": "modality/audio", "modalities": ["audio"]},
        {"key": "modality/visual", "modalities": ["visual"]},
        {"key": "modality/text", "modalities": ["text"]},
        {"key": "modality/text+visual", "modalities": ["text", "visual"]},
        {"key": "modality/text+audio", "modalities": ["text", "audio"]},
        {"key": "modality/text+audio+visual",
         "modalities": ["text", "audio", "visual"]},
    ]
    return {"cells": cells}


def teacher_study_spec() -> dict:
    """Full pipeline once per teacher-modality choice."""
    return {"cells": [
        {"key": "teacher/text", "teacher": "text"},
        {"key": "teacher/audio", "teacher": "audio"},
        {"key": "teacher/visual", "teacher": "visual"},
    ]}


def parse_grid_spec(spec: dict) -> list[GridCell]:
    if not isinstance(spec, dict) or "cells" not in spec:
        raise ConfigurationError("grid spec must be an object with a 'cells' list")
    cells = [GridCell.from_dict(c) for c in spec["cells"]]
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        raise ConfigurationError("grid cells must have unique keys")
    return cells


@dataclass
class CellRun:
    key: str
    seed: int
    report: EvalReport


@dataclass
class AblationGrid:
    cells: list[GridCell]
    runs: list[CellRun] = field(default_factory=list)

    def f1(self, key: str, seed: int) -> float:
        for run in self.runs:
            if run.key == key and run.seed == seed:
                return run.report.weighted_f1
        raise KeyError((key, seed))

    def mean_f1(self, key: str) -> float:
        values = [r.report.weighted_f1 for r in self.runs if r.key == key]
        if not values:
            raise KeyError(key)
        return float(np.mean(values))

    def summary(self) -> list[tuple[str, float, float]]:
        out = []
        for cell in self.cells:
            values = [r.report.weighted_f1 for r in self.runs if r.key == cell.key]
            out.append((cell.key, float(np.mean(values)),
                        float(np.std(values))))
        return out

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell", "seed", "weighted_f1"])
            for run in self.runs:
                writer.writerow([run.key, run.seed, repr(run.report.weighted_f1)])
            writer.writerow([])
            writer.writerow(["cell", "mean_weighted_f1", "std_weighted_f1"])
            for key, mean, std in self.summary():
                writer.writerow([key, repr(mean), repr(std)])

    def save_confusions(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for run in self.runs:
            safe = run.key.replace("/", "_").replace("+", "-")
            run.report.save_confusion_csv(out / f"confusion_{safe}_seed{run.seed}.csv")


def derive_cell_seed(base_seed: int, cell_key: str, run_seed: int) -> int:
    """Deterministic per-(cell, run) seed so parallel and serial execution of
    the grid give identical results."""
    ss = np.random.SeedSequence([base_seed, run_seed, zlib.crc32(cell_key.encode())])
    return int(ss.generate_state(1)[0])


def run_ablation(spec: dict, base_config, seeds: Sequence[int],
                 threads: int = 1) -> AblationGrid:
    """Train and evaluate every (cell, seed) pair on the shared dataset.

    Data comes from the base config's generator seed, identical for all cells;
    training streams are derived per (cell, seed). The runner records metrics
    and never fails a run for trend direction.
    """
    from .pipeline import prepare_dataset, run_cell  # deferred: heavier import

    cells = parse_grid_spec(spec)
    if not seeds:
        raise ConfigurationError("run_ablation needs at least one seed")
    data = prepare_dataset(base_config)
    grid = AblationGrid(cells=cells)
    jobs = [(cell, int(seed)) for cell in cells for seed in seeds]

    def execute(job):
        cell, seed = job
        report = run_cell(data, base_config, cell, run_seed=seed)
        return CellRun(key=cell.key, seed=seed, report=report)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grid.runs = list(pool.map(execute, jobs))
    else:
        grid.runs = [execute(job) for job in jobs]
    return grid
