"""Run configuration: one JSON document covering data, model, mining and training."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig
from .distill import TrainConfig
from .errors import ConfigError, MissingInput
from .pseudolabel import MiningConfig
from .simdata import AugmentConfig, DatasetConfig

CONFIG_FORMAT = "lpld-run-config"
CONFIG_VERSION = 1


@dataclass
class PretrainConfig:
    """Supervised source training; shares the optimizer update with adaptation."""

    epochs: int = 10
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    views: tuple[str, ...] = ("weak",)

    def __post_init__(self):
        self.views = tuple(self.views)
        if self.epochs < 0:
            raise ConfigError("pretrain epochs must be non-negative")
        if not self.lr > 0:
            raise ConfigError("pretrain learning rate must be positive")
        if any(v not in ("weak", "strong") for v in self.views) or not self.views:
            raise ConfigError("pretrain views must be a non-empty subset of weak/strong")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           epochs=self.epochs, seed=seed)


@dataclass
class MetricConfig:
    score_threshold: float = 0.5  # operating point for TP/FN counting and FNR
    hist_bins: int = 50

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold must lie in [0, 1]")
        if self.hist_bins < 1:
            raise ConfigError("hist_bins must be >= 1")


SECTIONS = {
    "dataset": DatasetConfig,
    "detector": DetectorConfig,
    "augment": AugmentConfig,
    "mining": MiningConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "metrics": MetricConfig,
}


def _section(cls, doc, name: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.detector.num_classes != self.dataset.num_classes:
            raise ConfigError("detector.num_classes must equal dataset.num_classes")
        if self.detector.channels != self.dataset.channels:
            raise ConfigError("detector.channels must equal dataset.channels")

    def train_config(self) -> TrainConfig:
        """Adaptation settings with the run seed substituted."""
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), "seed": int(seed)})

    def with_train(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        doc["train"] = {**doc["train"], **changes}
        return RunConfig.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, "seed": self.seed, "out_dir": self.out_dir}
        for name in SECTIONS:
            doc[name] = asdict(getattr(self, name))
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        doc = dict(doc)
        fmt = doc.pop("format", CONFIG_FORMAT)
        version = doc.pop("version", CONFIG_VERSION)
        if fmt != CONFIG_FORMAT:
            raise ConfigError(f"not a run config (format {fmt!r})")
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        extra = set(doc) - {"seed", "out_dir", *SECTIONS}
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        parts = {name: _section(c, doc.get(name), name) for name, c in SECTIONS.items()}
        seed = doc.get("seed", 0)
        out_dir = doc.get("out_dir", "runs")
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir must be a string")
        return cls(seed=seed, out_dir=out_dir, **parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())
