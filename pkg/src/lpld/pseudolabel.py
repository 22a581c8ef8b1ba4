"""Pseudo-label mining from teacher proposals.

High-confidence labels come out of the usual detector post-processing
(background slot removal, score filter, class-wise NMS, confidence
threshold). Low-confidence labels are mined from the FULL pre-NMS proposal
set in three filters: low overlap with every high-confidence box, raw
background probability below ``delta_bg``, and amplified foreground
confidence above ``delta_lc``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import boxgeom
from .detector import ProposalSet
from .errors import ConfigError
from .scorealg import amplify, background, foreground


@dataclass
class MiningConfig:
    delta_hc: float = 0.7
    delta_iou: float = 0.4
    delta_bg: float = 0.99
    delta_lc: float = 0.9
    nms_iou: float = 0.5
    pre_nms_score: float = 0.05
    classwise_nms: bool = True
    # score HPL on background-renormalized foreground scores instead of raw ones
    hpl_renormalize: bool = False

    def __post_init__(self):
        for name in ("delta_hc", "delta_iou", "delta_bg", "delta_lc", "nms_iou", "pre_nms_score"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class HighConfLabel:
    box: boxgeom.Box
    scores: np.ndarray
    class_id: int
    source_index: int = -1

    def to_dict(self) -> dict:
        return {"box": list(map(float, self.box)), "scores": [float(s) for s in self.scores],
                "class_id": int(self.class_id)}


@dataclass
class LowConfLabel:
    box: boxgeom.Box
    amp: np.ndarray
    source_index: int
    # teacher's refined box for this proposal; only the CE+REG loss variant reads it
    refined: boxgeom.Box | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {"box": list(map(float, self.box)), "amp": [float(a) for a in self.amp],
                "source_index": int(self.source_index)}


def hpl_scores(props: ProposalSet, cfg: MiningConfig) -> np.ndarray:
    fg = foreground(props.scores)
    if cfg.hpl_renormalize:
        mass = fg.sum(axis=1, keepdims=True)
        fg = np.divide(fg, mass, out=np.zeros_like(fg), where=mass > 0)
    return fg


def extract_hpl(props: ProposalSet, cfg: MiningConfig) -> list[HighConfLabel]:
    if len(props) == 0:
        return []
    fg = hpl_scores(props, cfg)
    conf = fg.max(axis=1)
    cls = fg.argmax(axis=1)
    cand = np.flatnonzero(conf >= cfg.pre_nms_score)
    if len(cand) == 0:
        return []
    groups = cls[cand] if cfg.classwise_nms else np.zeros(len(cand), dtype=np.int64)
    kept = boxgeom.batched_nms(props.boxes[cand], conf[cand], groups, cfg.nms_iou)
    out = []
    for k in kept:
        j = int(cand[k])
        if conf[j] > cfg.delta_hc:
            out.append(HighConfLabel(boxgeom.Box(*map(float, props.boxes[j])), props.scores[j].copy(),
                                     int(cls[j]), j))
    return out


def lpl_stages(props: ProposalSet, hpl: Sequence[HighConfLabel], cfg: MiningConfig) -> dict[str, np.ndarray]:
    """Surviving proposal indices after each mining filter.

    Keys: ``"iou"`` (low overlap with all HPL), ``"bg"`` (background
    filter) and ``"lc"`` (amplified-confidence filter, the final LPL).
    """
    n = len(props)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return {"iou": empty, "bg": empty, "lc": empty}
    if len(hpl):
        hboxes = np.asarray([tuple(h.box) for h in hpl], dtype=np.float64)
        overlap = boxgeom.iou_matrix(props.boxes, hboxes).max(axis=1)
    else:
        overlap = np.zeros(n)
    s1 = np.flatnonzero(overlap < cfg.delta_iou)
    s2 = s1[background(props.scores[s1]) < cfg.delta_bg]
    if len(s2):
        amp_max = amplify(props.scores[s2]).max(axis=1)
        s3 = s2[amp_max > cfg.delta_lc]
    else:
        s3 = s2
    return {"iou": s1, "bg": s2, "lc": s3}


def mine_lpl(props: ProposalSet, hpl: Sequence[HighConfLabel], cfg: MiningConfig,
             refined_boxes: np.ndarray | None = None) -> list[LowConfLabel]:
    idx = lpl_stages(props, hpl, cfg)["lc"]
    if len(idx) == 0:
        return []
    amp = amplify(props.scores[idx])
    out = []
    for k, j in enumerate(idx):
        ref = None if refined_boxes is None else boxgeom.Box(*map(float, refined_boxes[j]))
        out.append(LowConfLabel(boxgeom.Box(*map(float, props.boxes[j])), amp[k], int(j), ref))
    return out


def mining_dump(scene_id, hpl: Sequence[HighConfLabel], lpl: Sequence[LowConfLabel]) -> dict:
    return {"scene_id": scene_id, "hpl": [h.to_dict() for h in hpl], "lpl": [l.to_dict() for l in lpl]}

