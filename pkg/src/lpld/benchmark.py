"""Synthetic ablation benchmark shared by the ``report`` command and the acceptance suite.

A run pretrains a source detector per seed, adapts it on the target split
under each component combination and evaluates the teacher on the held-out
target scenes after every epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import detector as det
from . import distill, metrics
from .config import RunConfig
from .detector import DetectorParams
from .distill import TrainState
from .pseudolabel import extract_hpl, lpl_stages
from .simdata import Scene, augment, generate_dataset

log = logging.getLogger(__name__)

# component toggles per ablation row; "source-only" skips adaptation
VARIANTS: dict[str, dict | None] = {
    "source-only": None,
    "LPL": dict(use_hpl=False, use_lpl=True, use_adaptive_weights=False),
    "LPL+AW": dict(use_hpl=False, use_lpl=True, use_adaptive_weights=True),
    "HPL": dict(use_hpl=True, use_lpl=False, use_adaptive_weights=False),
    "HPL+LPL": dict(use_hpl=True, use_lpl=True, use_adaptive_weights=False),
    "HPL+LPL+AW": dict(use_hpl=True, use_lpl=True, use_adaptive_weights=True),
}
ORDERED = ("source-only", "HPL", "HPL+LPL", "HPL+LPL+AW")


def benchmark_config(seed: int = 0) -> RunConfig:
    """The preset used by the acceptance suite: small enough for five seeds on one core."""
    return RunConfig.from_dict({
        "seed": seed,
        "dataset": dict(background_level=0.5, gain=10.0, shift_angle=35.0, style_offset=0.0,
                        amplitude_range=(0.8, 1.2), size_range=(10.0, 28.0), clutter_per_scene=(0, 1),
                        class_weights=(1.0, 1.0, 1.0, 1.0, 0.4, 0.4)),
        "detector": dict(pooled=5, context=5 / 3, loss_reduction="mean"),
        "augment": dict(weak_noise=0.1, strong_noise=0.5),
        "pretrain": dict(epochs=10),
        "train": dict(epochs=4, lr=0.0003),
    })


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    toggles = VARIANTS[name]
    if toggles is None:
        raise ValueError(f"variant {name!r} has no adaptation stage")
    return cfg.with_train(**toggles)


def pretrain_source(cfg: RunConfig, scenes: Sequence[Scene]) -> tuple[DetectorParams, list[dict]]:
    init = DetectorParams.zeros(cfg.detector)
    return distill.pretrain(init, scenes, cfg.pretrain.train_config(cfg.seed), cfg.detector, cfg.augment,
                            views=cfg.pretrain.views)


def detections(params: DetectorParams, scenes: Sequence[Scene], cfg: RunConfig) -> list[tuple]:
    return [(det.detect(params, s.feature_map, cfg.detector), s.objects) for s in scenes]


def evaluate(params: DetectorParams, scenes: Sequence[Scene], cfg: RunConfig) -> metrics.EvalRecord:
    return metrics.evaluate(detections(params, scenes, cfg), cfg.detector.num_classes, cfg.dataset.minor_classes,
                            cfg.metrics.score_threshold)


def epoch_row(epoch: int, rec: metrics.EvalRecord) -> dict:
    """Flat per-epoch summary used by logs and the FNR-per-epoch report."""
    row = {"epoch": epoch, "mAP": rec.mAP, "tp": int(sum(rec.tp)), "fp": int(sum(rec.fp)), "fn": int(sum(rec.fn)),
           "score_threshold": rec.score_threshold}
    for k, v in rec.fnr_bucket.items():
        row[f"fnr_{k}"] = v
    for k, v in rec.fnr_group.items():
        row[f"fnr_{k}"] = v
    return row


def run_adaptation(cfg: RunConfig, source: DetectorParams, target: Sequence[Scene],
                   eval_scenes: Sequence[Scene] | None = None,
                   on_epoch: Callable[[TrainState, list[dict]], None] | None = None):
    """Adapt ``source`` on ``target``; returns ``(state, scene_logs, epoch_rows, epoch_records)``.

    With ``eval_scenes`` the teacher is evaluated after every epoch (epoch 0
    is the source model); otherwise both epoch lists stay empty.
    """
    rows: list[dict] = []
    records: list[metrics.EvalRecord] = []

    def record(epoch, params):
        records.append(evaluate(params, eval_scenes, cfg))
        rows.append(epoch_row(epoch, records[-1]))

    if eval_scenes is not None:
        record(0, source)

    def hook(state, recs):
        if eval_scenes is not None:
            record(state.epoch, state.teacher)
        if on_epoch is not None:
            on_epoch(state, recs)

    state, logs = distill.adapt(TrainState.from_source(source), target, cfg.mining, cfg.train_config(),
                                cfg.detector, cfg.augment, on_epoch=hook)
    return state, logs, rows, records


# -- proposal-level diagnostics ---------------------------------------------

def proposal_histogram(params: DetectorParams, scenes: Sequence[Scene], cfg: RunConfig,
                       view: str | None = None) -> metrics.HistogramGrid:
    grid = metrics.HistogramGrid.empty(cfg.metrics.hist_bins)
    for s in scenes:
        fm = s.feature_map if view is None else augment(s, view, (cfg.seed, 0), cfg.augment)
        grid = grid + metrics.conf_iou_histogram(det.forward(params, fm, cfg.detector), s.objects,
                                                 cfg.metrics.hist_bins)
    return grid


def positive_confidence(params: DetectorParams, scenes: Sequence[Scene], cfg: RunConfig,
                        iou_thresh: float = metrics.MATCH_IOU) -> tuple[float, int]:
    """Mean confidence among proposals overlapping some GT at ``iou_thresh`` or more."""
    confs = []
    for s in scenes:
        props = det.forward(params, s.feature_map, cfg.detector)
        hit = metrics.max_iou_with_gt(props.boxes, s.objects) >= iou_thresh
        confs.append(metrics.proposal_confidence(props)[hit])
    c = np.concatenate(confs) if confs else np.zeros(0)
    return (float(c.mean()) if len(c) else float("nan")), int(len(c))


def mined_proposals(params: DetectorParams, scene: Scene, cfg: RunConfig):
    """Teacher proposals on the weak view, boxes refined as during adaptation."""
    weak = augment(scene, "weak", (cfg.seed, 0), cfg.augment)
    props = det.forward(params, weak, cfg.detector, refine=False, scene_id=scene.id)
    if cfg.train.mine_refined:
        props.boxes = det.refine_boxes(props.boxes, props.scores, props.deltas, cfg.detector)
    return props


def stage_alignment(params: DetectorParams, scenes: Sequence[Scene], cfg: RunConfig) -> dict:
    """Pooled class-alignment ratio and counts through the three mining filters."""
    counts = []
    for s in scenes:
        props = mined_proposals(params, s, cfg)
        hpl = extract_hpl(props, cfg.mining)
        counts.append(metrics.stage_alignment_counts(props, lpl_stages(props, hpl, cfg.mining), s.objects))
    ratio = metrics.class_alignment_ratio(counts)
    totals = {k: [sum(c[k][0] for c in counts), sum(c[k][1] for c in counts)] for k in ("iou", "bg", "lc")}
    return {"ratio": ratio, "aligned": {k: v[0] for k, v in totals.items()}, "total": {k: v[1] for k, v in totals.items()}}


# -- multi-seed ablation -------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    source: DetectorParams
    source_eval: metrics.EvalRecord  # source model on held-out source scenes
    finals: dict[str, metrics.EvalRecord] = field(default_factory=dict)  # teacher on target_eval
    epochs: dict[str, list[dict]] = field(default_factory=dict)
    teachers: dict[str, DetectorParams] = field(default_factory=dict)


@dataclass
class Ablation:
    runs: list[SeedRun]
    seconds: float = 0.0

    def values(self, variant: str, key: Callable[[metrics.EvalRecord], float | None]) -> list[float]:
        out = []
        for r in self.runs:
            v = key(r.finals[variant])
            out.append(float("nan") if v is None else float(v))
        return out

    def median(self, variant: str, key=lambda rec: rec.mAP) -> float:
        return float(np.nanmedian(self.values(variant, key)))

    def summary(self) -> dict:
        names = list(self.runs[0].finals) if self.runs else []
        return {name: {"mAP": self.median(name), "fnr_minor": self.median(name, lambda r: r.fnr_group["minor"]),
                       "fnr_small": self.median(name, lambda r: r.fnr_bucket["small"])} for name in names}


def seed_run(cfg: RunConfig, variants: Sequence[str] = ORDERED, keep_teachers: bool = False) -> SeedRun:
    data = generate_dataset(cfg.dataset, cfg.seed)
    t0 = time.perf_counter()
    source, _ = pretrain_source(cfg, data["source"])
    log.info("seed %d: pretrained in %.1fs", cfg.seed, time.perf_counter() - t0)
    run = SeedRun(cfg.seed, source, evaluate(source, data["source_eval"], cfg))
    for name in variants:
        if VARIANTS[name] is None:
            rec = evaluate(source, data["target_eval"], cfg)
            run.finals[name] = rec
            run.epochs[name] = [epoch_row(0, rec)]
            continue
        t0 = time.perf_counter()
        state, _, rows, recs = run_adaptation(variant_config(cfg, name), source, data["target"], data["target_eval"])
        run.finals[name] = recs[-1]
        run.epochs[name] = rows
        if keep_teachers:
            run.teachers[name] = state.teacher
        log.info("seed %d %-11s mAP %.3f (%.1fs)", cfg.seed, name, run.finals[name].mAP, time.perf_counter() - t0)
    return run


def ablation(cfg: RunConfig, seeds: Sequence[int], variants: Sequence[str] = ORDERED,
             keep_teachers: bool = False) -> Ablation:
    t0 = time.perf_counter()
    runs = [seed_run(cfg.with_seed(s), variants, keep_teachers) for s in seeds]
    return Ablation(runs, time.perf_counter() - t0)
