"""Versioned text checkpoints: shapes, metadata and flat float64 arrays.

Format (JSON, sorted keys, one file per model):

    {
      "format": "emofuse-checkpoint",
      "version": 1,
      "kind": "<teacher|student|fusion|concat>",
      "meta": { ... arbitrary JSON metadata (config hash, seed, dims) ... },
      "arrays": { "<name>": {"shape": [...], "data": [flat float64 ...]} }
    }

Floats serialize via repr and therefore round-trip exactly; identical inputs
always produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DependencyError, SchemaError

CHECKPOINT_FORMAT = "emofuse-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in arrays.items()
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"missing checkpoint: expected {p}")
    with open(p, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{p} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {payload.get('version')!r}")
    arrays = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in payload["arrays"].items()
    }
    return payload["kind"], arrays, payload.get("meta", {})
