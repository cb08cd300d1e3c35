"""Seeded synthetic multimodal conversation data, plus feature-file I/O.

Each utterance carries three feature vectors (text / audio / visual) drawn
around class-specific mean directions with configurable per-modality
separation strengths, so the relative informativeness of the modalities is
fully controllable. A per-utterance expressiveness factor scales the class
signal of all three modalities together: an utterance delivered ambiguously
is ambiguous in every channel, which is what makes per-sample knowledge
transfer across modalities meaningful. The text feature is additionally
mixed with the mean of the previous turns' text features and concatenated
with a speaker one-hot block, so the text channel is the only one that sees
conversational context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, SchemaError

MODALITIES = ("text", "audio", "visual")

FEATURE_FILE_FORMAT = "emofuse-features"
FEATURE_FILE_VERSION = 1

SPLIT_NAMES = ("train", "dev", "test")


@dataclass(eq=False)
class FeatureRecord:
    """One utterance: ids, label and the three modality feature vectors."""

    dialogue_id: str
    turn: int
    speaker_id: str
    label: int
    text_feat: np.ndarray
    audio_feat: np.ndarray
    visual_feat: np.ndarray

    def feature(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {modality!r}")
        return getattr(self, f"{modality}_feat")


@dataclass(frozen=True)
class FeatureSchema:
    num_classes: int
    text_dim: int
    audio_dim: int
    visual_dim: int

    def dim(self, modality: str) -> int:
        return getattr(self, f"{modality}_dim")


@dataclass
class DatasetSplit:
    schema: FeatureSchema
    train: list[FeatureRecord]
    dev: list[FeatureRecord]
    test: list[FeatureRecord]

    def records(self, split: str) -> list[FeatureRecord]:
        if split not in SPLIT_NAMES:
            raise ConfigurationError(f"unknown split {split!r}")
        return getattr(self, split)


@dataclass
class GeneratorConfig:
    num_classes: int = 4
    dialogues_train: int = 200
    dialogues_dev: int = 40
    dialogues_test: int = 60
    utterances_min: int = 4
    utterances_max: int = 8
    text_dim: int = 16
    audio_dim: int = 16
    visual_dim: int = 16
    sep_text: float = 2.0
    sep_audio: float = 0.8
    sep_visual: float = 0.3
    context_mix: float = 0.3
    noise_scale: float = 1.0
    expressiveness_min: float = 0.2
    expressiveness_max: float = 1.8
    class_probs: list[float] | None = None
    num_speakers: int = 6
    seed: int = 0

    def resolved_class_probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_probs, dtype=np.float64)

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            num_classes=self.num_classes,
            text_dim=self.text_dim + self.num_speakers,
            audio_dim=self.audio_dim,
            visual_dim=self.visual_dim,
        )


def _validate_config(cfg: GeneratorConfig) -> None:
    if cfg.num_classes < 1:
        raise ConfigurationError("num_classes must be >= 1")
    if min(cfg.dialogues_train, cfg.dialogues_dev, cfg.dialogues_test) < 1:
        raise ConfigurationError("every split needs at least one dialogue")
    if cfg.utterances_min < 1 or cfg.utterances_max < cfg.utterances_min:
        raise ConfigurationError("bad utterances-per-dialogue range")
    if min(cfg.sep_text, cfg.sep_audio, cfg.sep_visual) < 0:
        raise ConfigurationError("separation strengths must be >= 0")
    if not 0.0 <= cfg.context_mix < 1.0:
        raise ConfigurationError("context_mix must lie in [0, 1)")
    if cfg.expressiveness_min < 0 or cfg.expressiveness_max < cfg.expressiveness_min:
        raise ConfigurationError("bad expressiveness range")
    if cfg.num_speakers < 1:
        raise ConfigurationError("num_speakers must be >= 1")
    probs = cfg.resolved_class_probs()
    if probs.shape != (cfg.num_classes,) or (probs < 0).any():
        raise ConfigurationError("class_probs must be nonnegative, one per class")
    if abs(float(probs.sum()) - 1.0) > 1e-9:
        raise ConfigurationError("class_probs must sum to 1 within 1e-9")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _class_means(rng: np.random.Generator, num_classes: int,
                 dims: dict[str, int]) -> dict[str, np.ndarray]:
    """Per-modality class mean directions with a shared Gram matrix.

    One latent class geometry is drawn and embedded into each modality's
    space by an orthonormal map, so pairwise class similarities agree across
    modalities: emotion classes that are confusable in one channel are
    confusable in all of them.
    """
    latent_dim = min(dims.values())
    latent = _unit_rows(rng, num_classes, latent_dim)
    means = {}
    for modality, dim in dims.items():
        gauss = rng.standard_normal((dim, latent_dim))
        q, r = np.linalg.qr(gauss)
        # Fix the sign convention so the embedding is deterministic.
        q = q * np.sign(np.diag(r))
        means[modality] = latent @ q.T
    return means


def generate(cfg: GeneratorConfig) -> DatasetSplit:
    """Generate a full train/dev/test dataset, deterministic in the seed."""
    _validate_config(cfg)
    children = np.random.SeedSequence(cfg.seed).spawn(4)
    means_rng = np.random.default_rng(children[0])
    means = _class_means(means_rng, cfg.num_classes, {
        "text": cfg.text_dim, "audio": cfg.audio_dim, "visual": cfg.visual_dim,
    })
    probs = cfg.resolved_class_probs()
    counts = {
        "train": cfg.dialogues_train,
        "dev": cfg.dialogues_dev,
        "test": cfg.dialogues_test,
    }
    splits: dict[str, list[FeatureRecord]] = {}
    for split_name, child in zip(SPLIT_NAMES, children[1:]):
        rng = np.random.default_rng(child)
        records: list[FeatureRecord] = []
        for di in range(counts[split_name]):
            dialogue_id = f"{split_name}-{di:04d}"
            n_utt = int(rng.integers(cfg.utterances_min, cfg.utterances_max + 1))
            prev_cores: list[np.ndarray] = []
            for turn in range(n_utt):
                speaker = int(rng.integers(cfg.num_speakers))
                label = int(rng.choice(cfg.num_classes, p=probs))
                # Shared expressiveness: one amplitude for the class signal of
                # all three modalities of this utterance.
                amp = rng.uniform(cfg.expressiveness_min, cfg.expressiveness_max)
                audio = amp * cfg.sep_audio * means["audio"][label] + \
                    cfg.noise_scale * rng.standard_normal(cfg.audio_dim)
                visual = amp * cfg.sep_visual * means["visual"][label] + \
                    cfg.noise_scale * rng.standard_normal(cfg.visual_dim)
                core = amp * cfg.sep_text * means["text"][label] + \
                    cfg.noise_scale * rng.standard_normal(cfg.text_dim)
                if prev_cores and cfg.context_mix > 0.0:
                    context = np.mean(prev_cores, axis=0)
                    core = (1.0 - cfg.context_mix) * core + cfg.context_mix * context
                prev_cores.append(core)
                one_hot = np.zeros(cfg.num_speakers)
                one_hot[speaker] = 1.0
                records.append(FeatureRecord(
                    dialogue_id=dialogue_id,
                    turn=turn,
                    speaker_id=f"spk{speaker}",
                    label=label,
                    text_feat=np.concatenate([core, one_hot]),
                    audio_feat=audio,
                    visual_feat=visual,
                ))
        splits[split_name] = records
    return DatasetSplit(schema=cfg.schema(), **splits)


# -- feature file I/O ----------------------------------------------------------
#
# UTF-8 text, one record per line. Line 1 is a header object carrying the
# format name, schema version, class count and the three feature dimensions;
# every following line is one utterance with an explicit "split" field.


def save_features(split: DatasetSplit, path) -> None:
    schema = split.schema
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": FEATURE_FILE_FORMAT,
            "schema_version": FEATURE_FILE_VERSION,
            "num_classes": schema.num_classes,
            "text_dim": schema.text_dim,
            "audio_dim": schema.audio_dim,
            "visual_dim": schema.visual_dim,
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for split_name in SPLIT_NAMES:
            for rec in split.records(split_name):
                obj = {
                    "dialogue_id": rec.dialogue_id,
                    "turn": rec.turn,
                    "speaker_id": rec.speaker_id,
                    "label": rec.label,
                    "split": split_name,
                    "text_feat": rec.text_feat.tolist(),
                    "audio_feat": rec.audio_feat.tolist(),
                    "visual_feat": rec.visual_feat.tolist(),
                }
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


_RECORD_KEYS = ("dialogue_id", "turn", "speaker_id", "label", "split",
                "text_feat", "audio_feat", "visual_feat")


def load_features(path) -> DatasetSplit:
    """Parse a feature file, validating schema and invariants line by line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty feature file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != FEATURE_FILE_FORMAT:
        raise SchemaError(f"not a {FEATURE_FILE_FORMAT} file", line=1)
    if header.get("schema_version") != FEATURE_FILE_VERSION:
        raise SchemaError(
            f"unsupported schema version {header.get('schema_version')!r}", line=1)
    try:
        schema = FeatureSchema(
            num_classes=int(header["num_classes"]),
            text_dim=int(header["text_dim"]),
            audio_dim=int(header["audio_dim"]),
            visual_dim=int(header["visual_dim"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"incomplete header: {exc}", line=1) from exc

    splits: dict[str, list[FeatureRecord]] = {name: [] for name in SPLIT_NAMES}
    dialogue_split: dict[str, str] = {}
    dialogue_turns: dict[str, list[int]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad record: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError("record is not an object", line=lineno)
        missing = [k for k in _RECORD_KEYS if k not in obj]
        if missing:
            raise SchemaError(f"missing keys {missing}", line=lineno)
        split_name = obj["split"]
        if split_name not in SPLIT_NAMES:
            raise SchemaError(f"unknown split {split_name!r}", line=lineno)
        try:
            label = int(obj["label"])
            turn = int(obj["turn"])
            feats = {m: np.asarray(obj[f"{m}_feat"], dtype=np.float64)
                     for m in MODALITIES}
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad field value: {exc}", line=lineno) from exc
        if not 0 <= label < schema.num_classes:
            raise SchemaError(
                f"label {label} out of range [0, {schema.num_classes})", line=lineno)
        for m in MODALITIES:
            if feats[m].ndim != 1 or feats[m].shape[0] != schema.dim(m):
                raise SchemaError(
                    f"{m}_feat has dim {feats[m].shape}, expected "
                    f"({schema.dim(m)},)", line=lineno)
            if not np.isfinite(feats[m]).all():
                raise SchemaError(f"{m}_feat has non-finite entries", line=lineno)
        dialogue_id = str(obj["dialogue_id"])
        previous = dialogue_split.setdefault(dialogue_id, split_name)
        if previous != split_name:
            raise SchemaError(
                f"dialogue {dialogue_id!r} appears in splits "
                f"{previous!r} and {split_name!r}", line=lineno)
        dialogue_turns.setdefault(dialogue_id, []).append(turn)
        splits[split_name].append(FeatureRecord(
            dialogue_id=dialogue_id,
            turn=turn,
            speaker_id=str(obj["speaker_id"]),
            label=label,
            text_feat=feats["text"],
            audio_feat=feats["audio"],
            visual_feat=feats["visual"],
        ))
    for dialogue_id, turns in dialogue_turns.items():
        if sorted(turns) != list(range(len(turns))):
            raise SchemaError(
                f"dialogue {dialogue_id!r} turns are not contiguous from 0")
    return DatasetSplit(schema=schema, train=splits["train"],
                        dev=splits["dev"], test=splits["test"])


def make_batches(records: Sequence[FeatureRecord], batch_size: int,
                 seed: int) -> list[list[FeatureRecord]]:
    """Seeded shuffle into batches; a trailing batch of size < 2 is dropped."""
    if batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2")
    order = np.random.default_rng(seed).permutation(len(records))
    batches = []
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        if len(chunk) >= 2:
            batches.append(chunk)
    return batches


def records_to_arrays(records: Iterable[FeatureRecord]):
    """Stack records into (text, audio, visual, labels) arrays."""
    recs = list(records)
    text = np.stack([r.text_feat for r in recs])
    audio = np.stack([r.audio_feat for r in recs])
    visual = np.stack([r.visual_feat for r in recs])
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return text, audio, visual, labels


def modality_matrix(records: Sequence[FeatureRecord], modality: str) -> np.ndarray:
    return np.stack([r.feature(modality) for r in records])


def labels_of(records: Sequence[FeatureRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)
