"""On-disk artifacts: canonical JSON, checkpoints, JSON-lines logs, manifests.

Floats are written with ``repr`` precision so a JSON round trip restores
parameters bit for bit, and every document is serialized with sorted keys so
identical inputs give byte-identical files. Anything volatile (timestamps,
argv, host) goes to a separate ``meta.json`` sidecar.
"""

from __future__ import annotations

import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import __version__
from .detector import DetectorParams
from .distill import SGDState, TrainState
from .errors import ConfigError, MissingInput
from .simdata import SPLITS, DatasetConfig

CHECKPOINT_FORMAT = "lpld-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_FORMAT = "lpld-dataset-manifest"


class CorruptInput(MissingInput):
    """An input file exists but cannot be used."""


def _clean(obj):
    # NaN/inf have no JSON spelling; they only arise as "undefined" metrics
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(doc))
    os.replace(tmp, path)
    return path


def read_json(path, what: str = "file"):
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptInput(f"{what} {path} is not valid JSON: {exc.msg}") from exc


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec), sort_keys=True, allow_nan=False) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"log not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_meta(out_dir, command: str, **extra) -> Path:
    """Volatile run metadata, kept apart from the deterministic outputs."""
    doc = {"command": command, "argv": sys.argv[1:], "version": __version__,
           "python": platform.python_version(), "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **extra}
    return write_json(Path(out_dir) / "meta.json", doc)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str  # "source" | "adapted"
    state: TrainState
    config_digest: str = ""

    def to_dict(self) -> dict:
        vel = self.state.optimizer.velocity
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": self.kind,
                "epoch": int(self.state.epoch), "config_digest": self.config_digest,
                "teacher": self.state.teacher.to_dict(), "student": self.state.student.to_dict(),
                "optimizer": {"velocity": None if vel is None else vel.to_dict()}}

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
            raise CorruptInput("not a checkpoint document")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CorruptInput(f"unsupported checkpoint version {doc.get('version')!r}")
        try:
            teacher = DetectorParams.from_dict(doc["teacher"])
            student = DetectorParams.from_dict(doc["student"])
            vel = doc["optimizer"]["velocity"]
            velocity = None if vel is None else DetectorParams.from_dict(vel)
            state = TrainState(teacher, student, SGDState(velocity), int(doc["epoch"]))
            return cls(str(doc["kind"]), state, str(doc.get("config_digest", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptInput(f"malformed checkpoint: {exc}") from exc

    @classmethod
    def source(cls, params: DetectorParams, digest: str = "") -> "Checkpoint":
        return cls("source", TrainState.from_source(params), digest)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return write_json(path, ckpt.to_dict())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_dict(read_json(path, "checkpoint"))


# -- dataset manifests --------------------------------------------------------

def load_manifest(path) -> tuple[DatasetConfig, int, dict]:
    """``(dataset config, seed, splits)`` from a manifest written by ``gen``."""
    doc = read_json(path, "manifest")
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise CorruptInput(f"{path} is not a dataset manifest")
    try:
        cfg = DatasetConfig.from_dict(doc["config"])
        seed = int(doc["seed"])
        splits = {s: list(doc["splits"][s]) for s in SPLITS}
    except (KeyError, TypeError) as exc:
        raise CorruptInput(f"malformed manifest: {exc}") from exc
    except ConfigError as exc:
        raise CorruptInput(f"manifest carries an invalid dataset config: {exc}") from exc
    return cfg, seed, splits
