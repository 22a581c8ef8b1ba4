"""Synthetic domain-shift detection benchmark.

A scene is a ``D x H x W`` feature map with objects painted as class
signatures over their (area-weighted) footprint. Channel layout for ``C``
classes: channel 0 carries the background level, channels ``1..C`` hold
the source class signatures and channels ``C+1..2C`` are the directions the
target domain rotates each signature toward. Further channels, if any, carry
texture only.

Every scene is regenerated on demand from ``(config, seed, split, index)``;
nothing but the manifest is ever stored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .boxgeom import Box
from .errors import ConfigError
from .roifeat import FeatureMap

SPLITS = ("source", "source_eval", "target", "target_eval")
SPLIT_DOMAIN = {"source": "source", "source_eval": "source", "target": "target", "target_eval": "target"}
SIZE_BUCKETS = ("small", "medium", "large")


@dataclass
class DatasetConfig:
    num_classes: int = 6
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 0.25, 0.25)
    minor_classes: tuple[int, ...] = (4, 5)
    objects_per_scene: tuple[int, int] = (2, 5)
    size_range: tuple[float, float] = (8.0, 28.0)
    aspect_jitter: float = 0.15
    amplitude_range: tuple[float, float] = (0.6, 1.2)
    grid: tuple[int, int] = (16, 16)  # (H, W) cells
    cell_size: float = 4.0
    channels: int = 13
    background_level: float = 0.5
    texture_sigma: float = 0.05
    clutter_per_scene: tuple[int, int] = (0, 2)
    clutter_amplitude: float = 0.4
    shift_angle: float = 50.0  # degrees; per-class override below
    class_shift_angles: tuple[float, ...] | None = None
    style_offset: float = 0.2
    noise_sigma: float = 0.05
    # global multiplier on the rendered map (feature units are arbitrary)
    gain: float = 1.0
    n_source: int = 200
    n_source_eval: int = 50
    n_target: int = 100
    n_target_eval: int = 50

    def __post_init__(self):
        for name in ("class_weights", "minor_classes", "objects_per_scene", "size_range",
                     "amplitude_range", "grid", "clutter_per_scene"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.class_shift_angles is not None:
            self.class_shift_angles = tuple(float(a) for a in self.class_shift_angles)
        self.validate()

    def validate(self) -> None:
        C = self.num_classes
        if C < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.class_weights) != C:
            raise ConfigError(f"class_weights has {len(self.class_weights)} entries, expected {C}")
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")
        if any(not 0 <= c < C for c in self.minor_classes):
            raise ConfigError("minor_classes out of range")
        if self.channels < 2 * C + 1:
            raise ConfigError(f"need at least {2 * C + 1} channels for {C} classes, got {self.channels}")
        if self.class_shift_angles is not None and len(self.class_shift_angles) != C:
            raise ConfigError("class_shift_angles must have one entry per class")
        if self.noise_sigma < 0 or self.texture_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if not self.gain > 0:
            raise ConfigError("gain must be positive")
        lo, hi = self.size_range
        H, W = self.grid
        if not 0 < lo <= hi or hi * (1 + self.aspect_jitter) > min(H, W) * self.cell_size:
            raise ConfigError("size_range must be positive and fit inside the scene")
        a, b = self.objects_per_scene
        if not 0 <= a <= b:
            raise ConfigError("objects_per_scene must be an increasing non-negative pair")
        if min(self.n_source, self.n_source_eval, self.n_target, self.n_target_eval) < 0:
            raise ConfigError("split sizes must be non-negative")

    @property
    def scene_size(self) -> tuple[float, float]:
        H, W = self.grid
        return W * self.cell_size, H * self.cell_size

    def angles(self) -> np.ndarray:
        if self.class_shift_angles is not None:
            return np.deg2rad(np.asarray(self.class_shift_angles))
        return np.full(self.num_classes, np.deg2rad(self.shift_angle))

    def split_size(self, split: str) -> int:
        return {"source": self.n_source, "source_eval": self.n_source_eval,
                "target": self.n_target, "target_eval": self.n_target_eval}[split]

    def bucket_edges(self) -> tuple[float, float]:
        """Area thresholds splitting the object-size distribution into thirds."""
        lo, hi = self.size_range
        return (lo + (hi - lo) / 3) ** 2, (lo + 2 * (hi - lo) / 3) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown dataset fields: {sorted(extra)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class AugmentConfig:
    weak_noise: float = 0.01
    strong_noise: float = 0.05
    channel_jitter: float = 0.3  # strong view scales each channel by U(1-j, 1+j)
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.15)
    erase_fill: float = 0.0

    def __post_init__(self):
        self.erase_area = tuple(self.erase_area)
        if min(self.weak_noise, self.strong_noise, self.channel_jitter) < 0:
            raise ConfigError("augmentation noise and jitter must be non-negative")
        if not 0.0 <= self.erase_prob <= 1.0:
            raise ConfigError("erase_prob must lie in [0, 1]")
        lo, hi = self.erase_area
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("erase_area must satisfy 0 <= low <= high <= 1")


@dataclass
class GroundTruthObject:
    box: Box
    class_id: int
    size_bucket: str = ""

    def to_dict(self) -> dict:
        return {"box": list(map(float, self.box)), "class_id": int(self.class_id),
                "size_bucket": self.size_bucket}


@dataclass
class Scene:
    id: str
    domain: str
    objects: list[GroundTruthObject]
    feature_map: FeatureMap = field(repr=False)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"id": self.id, "domain": self.domain, "seed": self.seed,
                "objects": [o.to_dict() for o in self.objects],
                "feature_map": {"scale": self.feature_map.scale,
                                "shape": list(self.feature_map.shape),
                                "data": self.feature_map.data.ravel().tolist()}}


def size_bucket(area: float, edges: tuple[float, float]) -> str:
    if area < edges[0]:
        return "small"
    if area < edges[1]:
        return "medium"
    return "large"


def scene_id(split: str, index: int) -> str:
    return f"{split}-{index:05d}"


def parse_scene_id(sid: str) -> tuple[str, int]:
    split, _, idx = sid.rpartition("-")
    if split not in SPLITS or not idx.isdigit():
        raise ConfigError(f"malformed scene id {sid!r}")
    return split, int(idx)


def _stream(seed: int, *tags) -> np.random.Generator:
    # order-independent per-scene stream
    digest = hashlib.sha256(json.dumps([int(seed), *map(str, tags)]).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


def sample_objects(cfg: DatasetConfig, rng: np.random.Generator) -> list[GroundTruthObject]:
    lo_n, hi_n = cfg.objects_per_scene
    n = int(rng.integers(lo_n, hi_n + 1))
    probs = np.asarray(cfg.class_weights) / np.sum(cfg.class_weights)
    sw, sh = cfg.scene_size
    edges = cfg.bucket_edges()
    out = []
    for _ in range(n):
        c = int(rng.choice(cfg.num_classes, p=probs))
        side = rng.uniform(*cfg.size_range)
        r = np.exp(rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter))
        w, h = side * r, side / r
        x1 = rng.uniform(0.0, sw - w)
        y1 = rng.uniform(0.0, sh - h)
        out.append(GroundTruthObject(Box(x1, y1, x1 + w, y1 + h), c, size_bucket(w * h, edges)))
    return out


def coverage(box: Sequence[float], height: int, width: int, cell: float) -> np.ndarray:
    """Fraction of each cell covered by ``box`` -> ``(H, W)``."""
    x1, y1, x2, y2 = box
    edges_x = np.arange(width + 1) * cell
    edges_y = np.arange(height + 1) * cell
    cx = np.clip(np.minimum(edges_x[1:], x2) - np.maximum(edges_x[:-1], x1), 0.0, None) / cell
    cy = np.clip(np.minimum(edges_y[1:], y2) - np.maximum(edges_y[:-1], y1), 0.0, None) / cell
    return cy[:, None] * cx[None, :]


def class_signatures(cfg: DatasetConfig, domain: str) -> np.ndarray:
    """``(C, D)`` unit signatures; target ones are rotated toward the spare channels."""
    C, D = cfg.num_classes, cfg.channels
    sig = np.zeros((C, D))
    ang = cfg.angles() if domain == "target" else np.zeros(C)
    for c in range(C):
        sig[c, 1 + c] = np.cos(ang[c])
        sig[c, 1 + C + c] = np.sin(ang[c])
    return sig


def render(objects: Sequence[GroundTruthObject], cfg: DatasetConfig, domain: str,
           rng: np.random.Generator) -> FeatureMap:
    H, W = cfg.grid
    D, C = cfg.channels, cfg.num_classes
    data = np.zeros((D, H, W))
    data[0] += cfg.background_level
    if cfg.texture_sigma > 0:
        data += rng.normal(0.0, cfg.texture_sigma, data.shape)
    sig = class_signatures(cfg, domain)
    for obj in objects:
        amp = rng.uniform(*cfg.amplitude_range)
        data += amp * sig[obj.class_id][:, None, None] * coverage(obj.box, H, W, cfg.cell_size)[None]
    lo_c, hi_c = cfg.clutter_per_scene
    sw, sh = cfg.scene_size
    for _ in range(int(rng.integers(lo_c, hi_c + 1))):
        side = rng.uniform(*cfg.size_range)
        x1, y1 = rng.uniform(0.0, sw - side), rng.uniform(0.0, sh - side)
        mix = rng.dirichlet(np.ones(2 * C))
        vec = np.zeros(D)
        vec[1:1 + 2 * C] = mix / np.linalg.norm(mix)
        data += cfg.clutter_amplitude * vec[:, None, None] * coverage((x1, y1, x1 + side, y1 + side), H, W,
                                                                      cfg.cell_size)[None]
    if domain == "target":
        data[0] += cfg.style_offset
        if cfg.noise_sigma > 0:
            data += rng.normal(0.0, cfg.noise_sigma, data.shape)
    if cfg.gain != 1.0:
        data *= cfg.gain
    return FeatureMap(data, cfg.cell_size)


def make_scene(cfg: DatasetConfig, seed: int, split: str, index: int) -> Scene:
    domain = SPLIT_DOMAIN[split]
    rng = _stream(seed, split, index)
    objects = sample_objects(cfg, rng)
    fm = render(objects, cfg, domain, rng)
    return Scene(scene_id(split, index), domain, objects, fm, seed)


def load_scene(cfg: DatasetConfig, seed: int, sid: str) -> Scene:
    split, idx = parse_scene_id(sid)
    return make_scene(cfg, seed, split, idx)


def generate_dataset(cfg: DatasetConfig, seed: int) -> dict[str, list[Scene]]:
    cfg.validate()
    return {split: [make_scene(cfg, seed, split, i) for i in range(cfg.split_size(split))] for split in SPLITS}


def manifest(cfg: DatasetConfig, seed: int) -> dict:
    return {"format": "lpld-dataset-manifest", "version": 1, "seed": int(seed), "config": cfg.to_dict(),
            "splits": {split: [scene_id(split, i) for i in range(cfg.split_size(split))] for split in SPLITS}}


def augment(scene: Scene | FeatureMap, kind: str, seed, cfg: AugmentConfig | None = None) -> FeatureMap:
    """Feature-space weak/strong view of a scene; geometry never changes."""
    cfg = cfg or AugmentConfig()
    fm = scene.feature_map if isinstance(scene, Scene) else scene
    tag = scene.id if isinstance(scene, Scene) else ""
    rng = _stream(0, "augment", kind, tag, *(seed if isinstance(seed, (tuple, list)) else (seed,)))
    data = fm.data.copy()
    if kind == "weak":
        if cfg.weak_noise > 0:
            data += rng.normal(0.0, cfg.weak_noise, data.shape)
        return FeatureMap(data, fm.scale)
    if kind != "strong":
        raise ValueError(f"unknown augmentation kind {kind!r}")
    D, H, W = data.shape
    if cfg.channel_jitter > 0:
        data *= rng.uniform(1 - cfg.channel_jitter, 1 + cfg.channel_jitter, (D, 1, 1))
    if cfg.strong_noise > 0:
        data += rng.normal(0.0, cfg.strong_noise, data.shape)
    if rng.random() < cfg.erase_prob:
        r = erase_rect(rng, H, W, cfg.erase_area)
        data[:, r[0]:r[1], r[2]:r[3]] = cfg.erase_fill
    return FeatureMap(data, fm.scale)


def erase_rect(rng: np.random.Generator, height: int, width: int, area: tuple[float, float]):
    frac = rng.uniform(*area)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(frac * height * width * aspect)), 1, height))
    w = int(np.clip(round(np.sqrt(frac * height * width / aspect)), 1, width))
    r0 = int(rng.integers(0, height - h + 1))
    c0 = int(rng.integers(0, width - w + 1))
    return r0, r0 + h, c0, c0 + w
