"""Toy two-stage detector with hand-written gradients.

Stage one is an anchor grid scored by a linear objectness head (the RPN
surrogate); stage two is a linear RoI head producing ``C + 1`` class logits
and class-specific box deltas. Features are RoI-Align samples of the input
feature map, so every loss is a smooth function of the head parameters
alone and gradients are exact closed forms.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import boxgeom
from .roifeat import FeatureMap, RoiSampler, make_sampler, roi_align_sampled
from .errors import ConfigError
from .scorealg import foreground, softmax

PARAM_FIELDS = ("w_obj", "b_obj", "W_cls", "b_cls", "W_reg", "b_reg")


@dataclass
class DetectorConfig:
    num_classes: int = 6
    channels: int = 13
    pooled: int = 3
    anchor_scales: tuple[float, ...] = (8.0, 12.0, 18.0, 27.0)
    anchor_ratios: tuple[float, ...] = (1.0,)
    top_k: int = 128
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_match_iou: float = 0.5
    smooth_l1_beta: float = 1.0
    loss_reduction: str = "sum"  # "sum" | "mean"
    refine: str = "mean"  # deltas used to refine proposals for mining: "mean" over classes | "argmax" class
    det_min_score: float = 0.05
    det_nms_iou: float = 0.5
    det_max: int = 100
    # RoI features pool over the box scaled by this factor about its center, so
    # the outer bins see just outside the box
    context: float = 1.0

    def __post_init__(self):
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")
        if self.refine not in ("argmax", "mean"):
            raise ConfigError(f"refine must be 'argmax' or 'mean', got {self.refine!r}")
        if not self.context > 0:
            raise ConfigError("context factor must be positive")
        for name in ("num_classes", "channels", "pooled", "top_k", "det_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.anchor_scales or min(self.anchor_scales) <= 0 or not self.anchor_ratios or min(self.anchor_ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be non-empty and positive")
        if not 0.0 <= self.rpn_neg_iou <= self.rpn_pos_iou <= 1.0:
            raise ConfigError("need 0 <= rpn_neg_iou <= rpn_pos_iou <= 1")
        for name in ("roi_match_iou", "det_min_score", "det_nms_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.smooth_l1_beta > 0:
            raise ConfigError("smooth_l1_beta must be positive")

    @property
    def feature_dim(self) -> int:
        return self.channels * self.pooled * self.pooled


@dataclass
class DetectorParams:
    w_obj: np.ndarray  # (F,)
    b_obj: np.ndarray  # (1,)
    W_cls: np.ndarray  # (C+1, F)
    b_cls: np.ndarray  # (C+1,)
    W_reg: np.ndarray  # (4C, F)
    b_reg: np.ndarray  # (4C,)

    @classmethod
    def zeros(cls, cfg: DetectorConfig) -> "DetectorParams":
        F, C = cfg.feature_dim, cfg.num_classes
        return cls(np.zeros(F), np.zeros(1), np.zeros((C + 1, F)), np.zeros(C + 1),
                   np.zeros((4 * C, F)), np.zeros(4 * C))

    @classmethod
    def random(cls, cfg: DetectorConfig, rng: np.random.Generator, std: float = 0.1) -> "DetectorParams":
        p = cls.zeros(cfg)
        for name in PARAM_FIELDS:
            arr = getattr(p, name)
            arr[...] = rng.normal(0.0, std, arr.shape)
        return p

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "DetectorParams":
        return DetectorParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "DetectorParams":
        return DetectorParams(*(np.zeros_like(a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "DetectorParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        if pos != len(vec):
            raise ValueError("flat vector length does not match parameter shapes")
        return DetectorParams(*out)

    def __add__(self, other: "DetectorParams") -> "DetectorParams":
        return DetectorParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scaled(self, k: float) -> "DetectorParams":
        return DetectorParams(*(k * a for a in self.arrays()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def check_shapes(self, cfg: DetectorConfig) -> None:
        ref = DetectorParams.zeros(cfg)
        for name, a, b in zip(PARAM_FIELDS, self.arrays(), ref.arrays()):
            if a.shape != b.shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {b.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")

    def to_dict(self) -> dict:
        return {name: {"shape": list(a.shape), "data": a.ravel().tolist()}
                for name, a in zip(PARAM_FIELDS, self.arrays())}

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorParams":
        return cls(*(np.asarray(doc[name]["data"], dtype=np.float64).reshape(doc[name]["shape"])
                     for name in PARAM_FIELDS))


@dataclass
class Proposal:
    box: boxgeom.Box
    scores: np.ndarray
    objectness: float


@dataclass
class ProposalSet:
    """Teacher/student proposals in descending objectness order."""

    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N, C+1)
    objectness: np.ndarray  # (N,)
    anchor_index: np.ndarray  # (N,)
    deltas: np.ndarray | None = None  # (N, C, 4)
    scene_id: str | int | None = None

    @classmethod
    def empty(cls, num_classes: int, scene_id=None) -> "ProposalSet":
        return cls(np.zeros((0, 4)), np.zeros((0, num_classes + 1)), np.zeros(0),
                   np.zeros(0, dtype=np.int64), np.zeros((0, num_classes, 4)), scene_id)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, j: int) -> Proposal:
        return Proposal(boxgeom.Box(*map(float, self.boxes[j])), self.scores[j], float(self.objectness[j]))

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1] - 1


# -- anchors ------------------------------------------------------------------

def generate_anchors(fm: FeatureMap, cfg: DetectorConfig) -> np.ndarray:
    return _anchor_grid(fm.height, fm.width, float(fm.scale), cfg.anchor_scales, cfg.anchor_ratios)


@functools.lru_cache(maxsize=32)
def _anchor_grid(height: int, width: int, scale: float, scales: tuple, ratios: tuple) -> np.ndarray:
    cy, cx = np.meshgrid((np.arange(height) + 0.5) * scale, (np.arange(width) + 0.5) * scale, indexing="ij")
    shapes = []
    for s in scales:
        for r in ratios:
            # ratio is height / width, area s^2
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            shapes.append((w, h))
    wh = np.asarray(shapes)  # (S*R, 2)
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = np.stack([cx - wh[None, :, 0] / 2, cy - wh[None, :, 1] / 2,
                      cx + wh[None, :, 0] / 2, cy + wh[None, :, 1] / 2], axis=-1)
    out = boxes.reshape(-1, 4)
    out.setflags(write=False)
    return out


def context_boxes(boxes, factor: float) -> np.ndarray:
    boxes = boxgeom.as_boxes(boxes)
    if factor == 1.0:
        return boxes
    c = 0.5 * (boxes[:, :2] + boxes[:, 2:])
    half = 0.5 * factor * (boxes[:, 2:] - boxes[:, :2])
    return np.concatenate([c - half, c + half], axis=1)


def head_sampler(boxes, fm: FeatureMap, cfg: DetectorConfig) -> RoiSampler:
    return make_sampler(context_boxes(boxes, cfg.context), cfg.pooled, fm.height, fm.width, fm.scale)


@functools.lru_cache(maxsize=32)
def _anchor_sampler(height: int, width: int, scale: float, scales: tuple, ratios: tuple,
                    pooled: int, context: float) -> RoiSampler:
    anchors = _anchor_grid(height, width, scale, scales, ratios)
    return make_sampler(context_boxes(anchors, context), pooled, height, width, scale)


def anchor_features(fm: FeatureMap, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Anchor boxes and their RoI features ``(A, F)``."""
    if fm.channels != cfg.channels:
        raise ValueError(f"feature map has {fm.channels} channels, detector expects {cfg.channels}")
    key = (fm.height, fm.width, float(fm.scale), cfg.anchor_scales, cfg.anchor_ratios)
    anchors = _anchor_grid(*key)
    sampler = _anchor_sampler(*key, cfg.pooled, cfg.context)
    return anchors, roi_align_sampled(fm, sampler)


# -- box coding ---------------------------------------------------------------

def encode_deltas(src, dst) -> np.ndarray:
    """``(dx, dy, dw, dh)`` taking boxes ``src`` onto ``dst`` (log-space sizes)."""
    src = boxgeom.as_boxes(src)
    dst = boxgeom.as_boxes(dst)
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    dw, dh = dst[:, 2] - dst[:, 0], dst[:, 3] - dst[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dx, dy = dst[:, 0] + 0.5 * dw, dst[:, 1] + 0.5 * dh
    return np.stack([(dx - sx) / sw, (dy - sy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=1)


def decode_deltas(src, deltas, clip: float = np.log(1000.0 / 16)) -> np.ndarray:
    src = boxgeom.as_boxes(src)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    cx = sx + deltas[:, 0] * sw
    cy = sy + deltas[:, 1] * sh
    w = sw * np.exp(np.minimum(deltas[:, 2], clip))
    h = sh * np.exp(np.minimum(deltas[:, 3], clip))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def smooth_l1(x, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth-L1 value and derivative."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    der = np.where(small, x / beta, np.sign(x))
    return val, der


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


# -- forward ------------------------------------------------------------------

def head_outputs(params: DetectorParams, feats: np.ndarray, num_classes: int):
    logits = feats @ params.W_cls.T + params.b_cls
    deltas = (feats @ params.W_reg.T + params.b_reg).reshape(len(feats), num_classes, 4)
    return logits, deltas


def select_top_k(objectness: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    return np.argsort(-objectness, kind="stable")[:k]


def forward(params: DetectorParams, fm: FeatureMap, cfg: DetectorConfig, refine: bool = False,
            scene_id=None) -> ProposalSet:
    anchors, feats = anchor_features(fm, cfg)
    obj = sigmoid(feats @ params.w_obj + params.b_obj[0])
    keep = select_top_k(obj, cfg.top_k)
    logits, deltas = head_outputs(params, feats[keep], cfg.num_classes)
    scores = softmax(logits)
    boxes = anchors[keep].copy()
    if refine:
        boxes = refine_boxes(boxes, scores, deltas, cfg)
    return ProposalSet(boxes, scores, obj[keep], keep, deltas, scene_id)


def refine_boxes(boxes, scores, deltas, cfg: DetectorConfig) -> np.ndarray:
    if len(boxes) == 0:
        return boxes
    if cfg.refine == "mean":
        d = deltas.mean(axis=1)
    else:
        d = deltas[np.arange(len(boxes)), np.argmax(foreground(scores), axis=1)]
    return decode_deltas(boxes, d)


def roi_scores(params: DetectorParams, fm: FeatureMap, boxes, cfg: DetectorConfig):
    """Class logits/deltas and features for arbitrary boxes (the RoI head alone)."""
    feats = roi_align_sampled(fm, head_sampler(boxes, fm, cfg))
    logits, deltas = head_outputs(params, feats, cfg.num_classes)
    return logits, deltas, feats


def detect(params: DetectorParams, fm: FeatureMap, cfg: DetectorConfig):
    """Final detections ``(boxes, classes, scores)`` after class-wise NMS."""
    props = forward(params, fm, cfg, refine=False)
    return postprocess(props, cfg)


def postprocess(props: ProposalSet, cfg: DetectorConfig):
    fg = foreground(props.scores)
    rows, cls = np.nonzero(fg >= cfg.det_min_score)
    if len(rows) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0)
    d = props.deltas[rows, cls] if props.deltas is not None else np.zeros((len(rows), 4))
    boxes = decode_deltas(props.boxes[rows], d)
    scores = fg[rows, cls]
    keep = boxgeom.batched_nms(boxes, scores, cls, cfg.det_nms_iou)[:cfg.det_max]
    return boxes[keep], cls[keep].astype(np.int64), scores[keep]


# -- loss ---------------------------------------------------------------------

@dataclass
class LossParts:
    rpn: float = 0.0
    cls: float = 0.0
    reg: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.rpn + self.cls + self.reg


def _label_arrays(labels: Sequence) -> tuple[np.ndarray, np.ndarray]:
    if len(labels) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    boxes = np.asarray([tuple(l.box) for l in labels], dtype=np.float64)
    cls = np.asarray([l.class_id for l in labels], dtype=np.int64)
    return boxes, cls


def mt_loss(student: DetectorParams, fm: FeatureMap, labels: Sequence, cfg: DetectorConfig):
    """Supervised detector loss against hard box labels (HPL or ground truth).

    ``labels`` items need ``.box`` and ``.class_id``. Returns
    ``(loss, grads, parts)`` with ``grads`` a :class:`DetectorParams`.
    """
    C = cfg.num_classes
    anchors, feats = anchor_features(fm, cfg)
    gt_boxes, gt_cls = _label_arrays(labels)
    grads = student.zeros_like()

    # RPN objectness, BCE over non-ignored anchors
    s = feats @ student.w_obj + student.b_obj[0]
    if len(gt_boxes):
        max_iou = boxgeom.iou_matrix(anchors, gt_boxes).max(axis=1)
    else:
        max_iou = np.zeros(len(anchors))
    y = (max_iou >= cfg.rpn_pos_iou).astype(np.float64)
    valid = (max_iou >= cfg.rpn_pos_iou) | (max_iou < cfg.rpn_neg_iou)
    bce = np.logaddexp(0.0, s) - y * s
    n_valid = max(int(valid.sum()), 1)
    norm_rpn = 1.0 / n_valid if cfg.loss_reduction == "mean" else 1.0
    l_rpn = float(bce[valid].sum()) * norm_rpn
    ds = np.where(valid, sigmoid(s) - y, 0.0) * norm_rpn
    grads.w_obj += feats.T @ ds
    grads.b_obj[0] += ds.sum()

    # RoI head on the student's own top-K proposals
    keep = select_top_k(sigmoid(s), cfg.top_k)
    pf = feats[keep]
    pboxes = anchors[keep]
    logits, deltas = head_outputs(student, pf, C)
    if len(gt_boxes):
        ious = boxgeom.iou_matrix(pboxes, gt_boxes)
        best = ious.argmax(axis=1)
        matched = ious[np.arange(len(keep)), best] >= cfg.roi_match_iou
    else:
        best = np.zeros(len(keep), dtype=np.int64)
        matched = np.zeros(len(keep), dtype=bool)
    target = np.full(len(keep), C, dtype=np.int64)
    target[matched] = gt_cls[best[matched]]
    n_props = max(len(keep), 1)
    norm_roi = 1.0 / n_props if cfg.loss_reduction == "mean" else 1.0
    lse = np.logaddexp.reduce(logits, axis=1)
    l_cls = float((lse - logits[np.arange(len(keep)), target]).sum()) * norm_roi
    dz = softmax(logits)
    dz[np.arange(len(keep)), target] -= 1.0
    dz *= norm_roi
    grads.W_cls += dz.T @ pf
    grads.b_cls += dz.sum(axis=0)

    l_reg = 0.0
    pos = np.flatnonzero(matched)
    if len(pos):
        t = encode_deltas(pboxes[pos], gt_boxes[best[pos]])
        pred = deltas[pos, target[pos]]
        val, der = smooth_l1(pred - t, cfg.smooth_l1_beta)
        l_reg = float(val.sum()) * norm_roi
        dd = np.zeros((len(pos), C, 4))
        dd[np.arange(len(pos)), target[pos]] = der * norm_roi
        dd = dd.reshape(len(pos), 4 * C)
        grads.W_reg += dd.T @ pf[pos]
        grads.b_reg += dd.sum(axis=0)

    parts = LossParts(l_rpn, l_cls, l_reg, {"n_pos_anchors": int(y.sum()), "n_pos_props": int(len(pos))})
    return parts.total, grads, parts
