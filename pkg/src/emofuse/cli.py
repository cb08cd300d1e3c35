"""Command-line entry point.

Commands: gen-data, train-teacher, distill, train-fusion, evaluate, ablate,
gradcheck. One JSON config file drives everything; any key can be overridden
with repeatable ``--set dotted.key=value`` flags. Every command writes a
manifest (config hash, seed, versions) beside its outputs.

Exit codes: 0 success, 1 usage/config error, 2 missing dependency,
3 check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CHECKPOINT_VERSION
from .config import (
    CONFIG_ENV_VAR,
    RunConfig,
    apply_overrides,
    load_config,
)
from .dataset import save_features
from .errors import (
    ConfigurationError,
    DependencyError,
    EmofuseError,
    InvalidInputError,
    InvalidParameterError,
    ParseError,
    SchemaError,
)
from .evaluation import default_grid_spec, parse_grid_spec, run_ablation, teacher_study_spec
from .pipeline import (
    dataset_from_file_or_config,
    evaluate_encoder_report,
    evaluate_fusion_report,
    load_encoder,
    load_fusion,
    prepare_dataset,
    save_encoder,
    save_fusion,
)
from .training import (
    GRADCHECK_LOSSES,
    distill_students,
    gradient_check,
    train_fusion,
    train_teacher,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEPENDENCY = 2
EXIT_CHECK_FAILED = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract wants 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_USAGE, f"error: {message}")


class SystemExit_(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code
        self.message = message


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_sha256": cfg.content_hash(),
        "seed": cfg.seed,
        "package_version": __version__,
        "checkpoint_version": CHECKPOINT_VERSION,
    }
    with open(out_dir / f"{command}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _checkpoint_meta(cfg: RunConfig) -> dict:
    return {"config_sha256": cfg.content_hash(), "seed": cfg.seed,
            "package_version": __version__}


def _check_meta(meta: dict, cfg: RunConfig, path, allow_mismatch: bool) -> None:
    stored = meta.get("config_sha256")
    if stored != cfg.content_hash() and not allow_mismatch:
        raise ConfigurationError(
            f"checkpoint {path} was produced under a different config "
            f"(hash {stored}); pass --allow-config-mismatch to use it anyway")


def _metrics_csv(path: Path, history) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "split", "loss", "weighted_f1"])
        for rec in history:
            writer.writerow([rec.epoch, rec.phase, "train",
                             repr(rec.train_loss), ""])
            writer.writerow([rec.epoch, rec.phase, "dev",
                             repr(rec.dev_loss), repr(rec.dev_f1)])


def _checkpoint_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / f"{name}.json"


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data = prepare_dataset(cfg)
    out = Path(args.out or cfg.paths.data_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features(data, out)
    _write_manifest(out.parent, "gen-data", cfg)
    counts = {name: len(data.records(name)) for name in ("train", "dev", "test")}
    print(f"wrote {out} ({counts['train']}/{counts['dev']}/{counts['test']} "
          "train/dev/test utterances)")
    return EXIT_OK


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    data = dataset_from_file_or_config(cfg)
    teacher = train_teacher(data, cfg.train)
    path = _checkpoint_path(cfg, "teacher")
    save_encoder(path, teacher, "teacher", _checkpoint_meta(cfg))
    out_dir = Path(cfg.paths.output_dir)
    _metrics_csv(out_dir / "metrics_teacher.csv", teacher.history)
    _write_manifest(out_dir, "train-teacher", cfg)
    print(f"teacher ({teacher.modality}) best dev F1 "
          f"{teacher.best_dev_f1:.4f} at epoch {teacher.best_epoch}; wrote {path}")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    data = dataset_from_file_or_config(cfg)
    teacher, meta = load_encoder(_checkpoint_path(cfg, "teacher"), "teacher")
    _check_meta(meta, cfg, _checkpoint_path(cfg, "teacher"),
                args.allow_config_mismatch)
    students = distill_students(data, teacher, cfg.train)
    out_dir = Path(cfg.paths.output_dir)
    for modality, student in students.items():
        path = _checkpoint_path(cfg, f"student_{modality}")
        save_encoder(path, student, "student", _checkpoint_meta(cfg))
        _metrics_csv(out_dir / f"metrics_student_{modality}.csv", student.history)
        print(f"student ({modality}) best dev F1 {student.best_dev_f1:.4f} "
              f"at epoch {student.best_epoch}; wrote {path}")
    _write_manifest(out_dir, "distill", cfg)
    return EXIT_OK


def cmd_train_fusion(cfg: RunConfig, args) -> int:
    data = dataset_from_file_or_config(cfg)
    teacher, meta = load_encoder(_checkpoint_path(cfg, "teacher"), "teacher")
    _check_meta(meta, cfg, _checkpoint_path(cfg, "teacher"),
                args.allow_config_mismatch)
    students = {}
    for modality in cfg.train.student_modalities():
        path = _checkpoint_path(cfg, f"student_{modality}")
        student, smeta = load_encoder(path, "student")
        _check_meta(smeta, cfg, path, args.allow_config_mismatch)
        students[modality] = student
    fusion = train_fusion(data, teacher, students, cfg.train, mode=args.mode)
    path = _checkpoint_path(cfg, "fusion")
    save_fusion(path, fusion, _checkpoint_meta(cfg))
    out_dir = Path(cfg.paths.output_dir)
    _metrics_csv(out_dir / "metrics_fusion.csv", fusion.history)
    _write_manifest(out_dir, "train-fusion", cfg)
    print(f"fusion ({fusion.kind}) best dev F1 {fusion.best_dev_f1:.4f} "
          f"at epoch {fusion.best_epoch}; wrote {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    data = dataset_from_file_or_config(cfg)
    out_dir = Path(cfg.paths.output_dir)
    model_name = args.model
    if model_name == "fused":
        teacher, meta = load_encoder(_checkpoint_path(cfg, "teacher"), "teacher")
        _check_meta(meta, cfg, _checkpoint_path(cfg, "teacher"),
                    args.allow_config_mismatch)
        fusion, fmeta = load_fusion(_checkpoint_path(cfg, "fusion"))
        _check_meta(fmeta, cfg, _checkpoint_path(cfg, "fusion"),
                    args.allow_config_mismatch)
        students = {}
        for modality in fusion.student_order:
            path = _checkpoint_path(cfg, f"student_{modality}")
            student, smeta = load_encoder(path, "student")
            _check_meta(smeta, cfg, path, args.allow_config_mismatch)
            students[modality] = student
        report = evaluate_fusion_report(fusion, teacher, students, data,
                                        args.split)
    elif model_name == "teacher":
        teacher, meta = load_encoder(_checkpoint_path(cfg, "teacher"), "teacher")
        _check_meta(meta, cfg, _checkpoint_path(cfg, "teacher"),
                    args.allow_config_mismatch)
        report = evaluate_encoder_report(teacher, data, args.split)
    else:  # audio / visual student
        path = _checkpoint_path(cfg, f"student_{model_name}")
        student, smeta = load_encoder(path, "student")
        _check_meta(smeta, cfg, path, args.allow_config_mismatch)
        report = evaluate_encoder_report(student, data, args.split)
    report.save(out_dir / f"eval_{model_name}_{args.split}.json")
    report.save_confusion_csv(out_dir / f"confusion_{model_name}_{args.split}.csv")
    _write_manifest(out_dir, "evaluate", cfg)
    print(f"{model_name} on {args.split}: weighted F1 {report.weighted_f1:.4f} "
          f"(reports in {out_dir})")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    if args.grid == "default":
        spec = default_grid_spec()
    elif args.grid == "teacher-study":
        spec = teacher_study_spec()
    else:
        grid_path = Path(args.grid)
        if not grid_path.exists():
            raise DependencyError(f"missing grid spec: expected {grid_path}")
        with open(grid_path, "r", encoding="utf-8") as fh:
            try:
                spec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"grid spec is not valid JSON: {exc.msg}",
                                 line=exc.lineno) from exc
    parse_grid_spec(spec)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    grid = run_ablation(spec, cfg, seeds, threads=args.threads)
    out_dir = Path(cfg.paths.output_dir)
    grid.save_csv(out_dir / "ablation.csv")
    grid.save_confusions(out_dir / "ablation_confusions")
    _write_manifest(out_dir, "ablate", cfg)
    for key, mean, std in grid.summary():
        print(f"{key}: mean weighted F1 {mean:.4f} (std {std:.4f})")
    toggle_keys = ["toggles/asf_no_kd", "toggles/asf_response",
                   "toggles/asf_response_feature"]
    if all(any(c.key == k for c in grid.cells) for k in toggle_keys):
        means = [grid.mean_f1(k) for k in toggle_keys]
        direction = "monotone" if means[0] <= means[1] <= means[2] else "mixed"
        print(f"toggle trend (no KD -> +response -> +both): {direction} "
              f"({', '.join(f'{m:.4f}' for m in means)})")
    print(f"wrote {out_dir / 'ablation.csv'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    losses = GRADCHECK_LOSSES if args.loss == "all" else (args.loss,)
    worst = 0.0
    out_dir = Path(cfg.paths.output_dir)
    lines = []
    for loss_id in losses:
        report = gradient_check(loss_id, seeds=args.seeds)
        worst = max(worst, report.max_rel_err)
        status = "ok" if report.max_rel_err <= GRADCHECK_TOLERANCE else "FAIL"
        line = (f"{loss_id}: max rel err {report.max_rel_err:.3e} "
                f"over {len(report.seeds)} seeds [{status}]")
        lines.append(line)
        print(line)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "gradcheck.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "gradcheck", cfg)
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_CHECK_FAILED


# -- argument plumbing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emofuse",
                     description="cross-modal distillation + shifting fusion "
                                 "pipeline on synthetic conversation data")
    parser.add_argument("--config", help="path to the JSON run config "
                        f"(default: ${CONFIG_ENV_VAR} if set, else built-ins)")
    parser.add_argument("--seed", type=int,
                        help="override both the run seed and the data seed")
    parser.add_argument("--out-dir", help="override paths.output_dir")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for ablation cells")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override a config value by "
                        "dotted path (repeatable)")
    parser.add_argument("--allow-config-mismatch", action="store_true",
                        help="use checkpoints whose recorded config hash "
                             "differs from the active config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic feature file")
    p.add_argument("--out", help="output path (default: paths.data_file)")
    sub.add_parser("train-teacher", help="phase 1: train the teacher encoder")
    sub.add_parser("distill", help="phase 2: distill both students")
    p = sub.add_parser("train-fusion", help="phase 3: train the fusion stage")
    p.add_argument("--mode", choices=("asf", "concat"), default="asf")
    p = sub.add_parser("evaluate", help="evaluate a trained model on a split")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--model", choices=("fused", "teacher", "audio", "visual",
                                       "text"), default="fused")
    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", default="default",
                   help="'default', 'teacher-study' or a grid spec JSON path")
    p.add_argument("--seeds", default="1,2,3", help="comma-separated run seeds")
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("loss", choices=GRADCHECK_LOSSES + ("all",))
    p.add_argument("--seeds", type=int, default=20)
    return parser


def resolve_config(args) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV_VAR)
    cfg = load_config(path) if path else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out_dir:
        cfg.paths.output_dir = args.out_dir
    return cfg


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except SystemExit_ as exc:
        if exc.message:
            print(exc.message, file=sys.stderr)
        return exc.code
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigurationError, InvalidParameterError, InvalidInputError,
            ParseError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EmofuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
