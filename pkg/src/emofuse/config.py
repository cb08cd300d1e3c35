"""Run configuration: one JSON file driving data generation, training,
evaluation and ablations, with dotted-path overrides and a content hash.

The hash covers everything except the paths section, so relocating outputs
does not invalidate earlier checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import GeneratorConfig
from .distillation import KDConfig
from .errors import ConfigurationError, ParseError
from .fusion import FusionConfig
from .training import TrainConfig

CONFIG_ENV_VAR = "EMOFUSE_CONFIG"


@dataclass
class PathsConfig:
    data_file: str = "data/features.jsonl"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


@dataclass
class RunConfig:
    seed: int = 0
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        known = {"seed", "data", "train", "paths"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        data = _build_dataclass(GeneratorConfig, obj.get("data", {}), "data")
        train_obj = dict(obj.get("train", {}))
        kd = _build_dataclass(KDConfig, train_obj.pop("kd", {}), "train.kd")
        fusion = _build_dataclass(FusionConfig, train_obj.pop("fusion", {}),
                                  "train.fusion")
        train = _build_dataclass(TrainConfig, train_obj, "train",
                                 extra={"kd": kd, "fusion": fusion})
        paths = _build_dataclass(PathsConfig, obj.get("paths", {}), "paths")
        return cls(seed=int(obj.get("seed", 0)), data=data, train=train,
                   paths=paths)

    def canonical_json(self, include_paths: bool = True) -> str:
        obj = self.to_dict()
        if not include_paths:
            obj.pop("paths")
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(
            self.canonical_json(include_paths=False).encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with both the training seed and the data seed replaced."""
        out = RunConfig.from_dict(self.to_dict())
        out.seed = int(seed)
        out.train.seed = int(seed)
        out.data.seed = int(seed)
        return out


def _build_dataclass(cls, obj: dict, where: str, extra: dict | None = None):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(obj)
    if extra:
        kwargs.update(extra)
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config is not valid JSON: {exc.msg}",
                         line=exc.lineno) from exc
    return RunConfig.from_dict(obj)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _coerce_like(current, raw: str, keypath: str):
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{keypath}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{keypath}: expected an integer, got {raw!r}")
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{keypath}: expected a number, got {raw!r}")
    if isinstance(current, str):
        return raw
    # None and lists take JSON literals.
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigurationError(f"{keypath}: could not parse value {raw!r}")


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply repeatable ``--set dotted.key=value`` overrides."""
    obj = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key=value")
        keypath, raw = item.split("=", 1)
        parts = keypath.strip().split(".")
        node = obj
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"unknown config key path {keypath!r}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigurationError(f"unknown config key path {keypath!r}")
        node[leaf] = _coerce_like(node[leaf], raw, keypath)
    return RunConfig.from_dict(obj)
