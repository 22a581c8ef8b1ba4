"""Low-confidence distillation losses, optimizer, EMA teacher and the adaptation loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import detector as det
from .boxgeom import as_boxes
from .detector import DetectorConfig, DetectorParams, LossParts
from .errors import ConfigError, InvariantViolation
from .pseudolabel import LowConfLabel, MiningConfig, extract_hpl, mine_lpl
from .roifeat import FeatureMap, cosine_distances, roi_align_many
from .scorealg import kl_div_grad_logits, softmax
from .simdata import AugmentConfig, Scene, augment

log = logging.getLogger(__name__)

LPL_LOSS_KINDS = ("KL", "CE", "CE+REG")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    ema_rate: float = 0.75
    ema_per_iteration: bool = False
    epochs: int = 1
    seed: int = 0
    shuffle: bool = True
    use_hpl: bool = True
    use_lpl: bool = True
    use_adaptive_weights: bool = True
    lpl_loss_kind: str = "KL"
    mine_refined: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ConfigError("EMA rate must lie in [0, 1]")
        if self.lpl_loss_kind not in LPL_LOSS_KINDS:
            raise ConfigError(f"lpl_loss_kind must be one of {LPL_LOSS_KINDS}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- adaptive weights and the LPL loss ----------------------------------------

def adaptive_weights(student_fm: FeatureMap, teacher_fm: FeatureMap, lpl: Sequence[LowConfLabel],
                     pooled: int = 3) -> np.ndarray:
    """Cosine distance between student and teacher RoI features of each LPL box."""
    if student_fm.shape != teacher_fm.shape:
        raise ValueError("student and teacher feature maps differ in shape")
    if len(lpl) == 0:
        return np.zeros(0)
    boxes = as_boxes([tuple(l.box) for l in lpl])
    return cosine_distances(roi_align_many(student_fm, boxes, pooled), roi_align_many(teacher_fm, boxes, pooled))


def lpld_loss(student: DetectorParams, fm: FeatureMap, lpl: Sequence[LowConfLabel], alpha, cfg: DetectorConfig,
              weighted: bool = True, kind: str = "KL"):
    """Distillation of teacher LPL distributions into the student RoI head.

    The student re-scores every LPL box on ``fm``. ``KL`` compares the
    student's amplified foreground distribution with the LPL target;
    ``CE`` trains the full softmax on the target's argmax class; ``CE+REG``
    adds a smooth-L1 term pulling the student's deltas toward the teacher's
    refined box. Each term is scaled by ``alpha`` when ``weighted`` and the
    sum is divided by ``len(lpl)``. Returns ``(loss, grads)``.
    """
    grads = student.zeros_like()
    n = len(lpl)
    if n == 0:
        return 0.0, grads
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != n:
        raise ValueError("alpha and lpl differ in length")
    C = cfg.num_classes
    boxes = as_boxes([tuple(l.box) for l in lpl])
    logits, deltas, feats = det.roi_scores(student, fm, boxes, cfg)
    targets = np.stack([l.amp for l in lpl])
    w = (alpha if weighted else np.ones(n)) / n

    if kind == "KL":
        per, dz_fg = kl_div_grad_logits(logits[:, :C], targets)
        loss = float(w @ per)
        dz = np.zeros_like(logits)
        dz[:, :C] = dz_fg * w[:, None]
    elif kind in ("CE", "CE+REG"):
        cls = targets.argmax(axis=1)
        lse = np.logaddexp.reduce(logits, axis=1)
        loss = float(w @ (lse - logits[np.arange(n), cls]))
        dz = softmax(logits)
        dz[np.arange(n), cls] -= 1.0
        dz *= w[:, None]
    else:
        raise ConfigError(f"unknown LPL loss kind {kind!r}")
    grads.W_cls += dz.T @ feats
    grads.b_cls += dz.sum(axis=0)

    if kind == "CE+REG":
        ref = as_boxes([tuple(l.refined if l.refined is not None else l.box) for l in lpl])
        t = det.encode_deltas(boxes, ref)
        pred = deltas[np.arange(n), cls]
        val, der = det.smooth_l1(pred - t, cfg.smooth_l1_beta)
        loss += float(w @ val.sum(axis=1))
        dd = np.zeros((n, C, 4))
        dd[np.arange(n), cls] = der * w[:, None]
        dd = dd.reshape(n, 4 * C)
        grads.W_reg += dd.T @ feats
        grads.b_reg += dd.sum(axis=0)
    return loss, grads


def total_loss(student: DetectorParams, fm_strong: FeatureMap, hpl, lpl, alpha, det_cfg: DetectorConfig,
               train_cfg: TrainConfig):
    """Mean-Teacher loss on HPL plus LPL distillation, per the component toggles.

    Returns ``(loss, grads, parts)`` where ``parts`` holds the two components.
    """
    if not (train_cfg.use_hpl or train_cfg.use_lpl):
        raise ConfigError("at least one of use_hpl / use_lpl must be enabled")
    grads = student.zeros_like()
    parts = {"mt": 0.0, "lpld": 0.0}
    if train_cfg.use_hpl:
        l_mt, g_mt, _ = det.mt_loss(student, fm_strong, hpl, det_cfg)
        parts["mt"] = l_mt
        grads = grads + g_mt
    if train_cfg.use_lpl:
        l_lp, g_lp = lpld_loss(student, fm_strong, lpl, alpha, det_cfg,
                               weighted=train_cfg.use_adaptive_weights, kind=train_cfg.lpl_loss_kind)
        parts["lpld"] = l_lp
        grads = grads + g_lp
    return parts["mt"] + parts["lpld"], grads, parts


# -- optimizer / EMA ----------------------------------------------------------

@dataclass
class SGDState:
    velocity: DetectorParams | None = None


def sgd_step(params: DetectorParams, grads: DetectorParams, state: SGDState, cfg: TrainConfig):
    """Momentum SGD with coupled weight decay; returns ``(params, state)``."""
    vel = state.velocity if state.velocity is not None else params.zeros_like()
    new_v, new_p = [], []
    for p, g, v in zip(params.arrays(), grads.arrays(), vel.arrays()):
        v = cfg.momentum * v + (g + cfg.weight_decay * p)
        new_v.append(v)
        new_p.append(p - cfg.lr * v)
    return DetectorParams(*new_p), SGDState(DetectorParams(*new_v))


def ema_update(teacher: DetectorParams, student: DetectorParams, m: float) -> DetectorParams:
    if not 0.0 <= m <= 1.0:
        raise ConfigError("EMA rate must lie in [0, 1]")
    if m == 0.0:
        return student.copy()
    # increment form: exact fixed point when student == teacher
    return DetectorParams(*(t + (1.0 - m) * (s - t) for t, s in zip(teacher.arrays(), student.arrays())))


# -- training loops -----------------------------------------------------------

@dataclass
class TrainState:
    teacher: DetectorParams
    student: DetectorParams
    optimizer: SGDState = field(default_factory=SGDState)
    epoch: int = 0

    @classmethod
    def from_source(cls, params: DetectorParams) -> "TrainState":
        return cls(params.copy(), params.copy())

    def copy(self) -> "TrainState":
        vel = None if self.optimizer.velocity is None else self.optimizer.velocity.copy()
        return TrainState(self.teacher.copy(), self.student.copy(), SGDState(vel), self.epoch)


def scene_order(n: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    if not cfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([cfg.seed, epoch, 7411]).permutation(n)


def adapt_scene(state: TrainState, scene: Scene, mining: MiningConfig, cfg: TrainConfig, det_cfg: DetectorConfig,
                aug: AugmentConfig | None = None) -> tuple[TrainState, dict]:
    """One source-free adaptation step on a single target scene."""
    weak = augment(scene, "weak", (cfg.seed, state.epoch), aug)
    strong = augment(scene, "strong", (cfg.seed, state.epoch), aug)
    props = det.forward(state.teacher, weak, det_cfg, refine=False, scene_id=scene.id)
    boxes = det.refine_boxes(props.boxes, props.scores, props.deltas, det_cfg)
    if cfg.mine_refined:
        props.boxes = boxes
    hpl = extract_hpl(props, mining)
    lpl = mine_lpl(props, hpl, mining, refined_boxes=boxes) if cfg.use_lpl else []
    alpha = adaptive_weights(strong, weak, lpl, det_cfg.pooled) if lpl else np.zeros(0)
    loss, grads, parts = total_loss(state.student, strong, hpl, lpl, alpha, det_cfg, cfg)
    student, opt = sgd_step(state.student, grads, state.optimizer, cfg)
    teacher = state.teacher
    if cfg.ema_per_iteration:
        teacher = ema_update(teacher, student, cfg.ema_rate)
    record = {"epoch": state.epoch, "scene_id": scene.id, "n_hpl": len(hpl), "n_lpl": len(lpl),
              "loss_mt": parts["mt"], "loss_lpld": parts["lpld"],
              "mean_alpha": float(alpha.mean()) if len(alpha) else None}
    return TrainState(teacher, student, opt, state.epoch), record


def adapt_epoch(state: TrainState, scenes: Sequence[Scene], mining: MiningConfig, cfg: TrainConfig,
                det_cfg: DetectorConfig, aug: AugmentConfig | None = None) -> tuple[TrainState, list[dict]]:
    """One pass over the target scenes, then the end-of-epoch EMA update."""
    if not (cfg.use_hpl or cfg.use_lpl):
        raise ConfigError("at least one of use_hpl / use_lpl must be enabled")
    records = []
    teacher_sum = state.teacher.checksum()
    for i in scene_order(len(scenes), cfg, state.epoch):
        state, rec = adapt_scene(state, scenes[i], mining, cfg, det_cfg, aug)
        records.append(rec)
    if not cfg.ema_per_iteration:
        if state.teacher.checksum() != teacher_sum:
            raise InvariantViolation("teacher parameters changed inside the epoch body")
        state = TrainState(ema_update(state.teacher, state.student, cfg.ema_rate), state.student,
                           state.optimizer, state.epoch)
    state.epoch += 1
    return state, records


def adapt(state: TrainState, scenes: Sequence[Scene], mining: MiningConfig, cfg: TrainConfig,
          det_cfg: DetectorConfig, aug: AugmentConfig | None = None, epochs: int | None = None,
          on_epoch=None) -> tuple[TrainState, list[dict]]:
    records: list[dict] = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        state, recs = adapt_epoch(state, scenes, mining, cfg, det_cfg, aug)
        records.extend(recs)
        if on_epoch is not None:
            on_epoch(state, recs)
    return state, records


def pretrain(params: DetectorParams, scenes: Sequence[Scene], cfg: TrainConfig, det_cfg: DetectorConfig,
             aug: AugmentConfig | None = None, epochs: int | None = None,
             views: Iterable[str] = ("weak",)) -> tuple[DetectorParams, list[dict]]:
    """Supervised source training with ground truth standing in for HPL."""
    opt = SGDState()
    records = []
    views = tuple(views)
    for epoch in range(cfg.epochs if epochs is None else epochs):
        for i in scene_order(len(scenes), cfg, epoch):
            scene = scenes[i]
            for view in views:
                fm = augment(scene, view, (cfg.seed, epoch), aug)
                loss, grads, parts = det.mt_loss(params, fm, scene.objects, det_cfg)
                params, opt = sgd_step(params, grads, opt, cfg)
                records.append({"epoch": epoch, "scene_id": scene.id, "view": view, "loss": loss,
                                "loss_rpn": parts.rpn, "loss_cls": parts.cls, "loss_reg": parts.reg})
    return params, records


__all__ = ["TrainConfig", "TrainState", "SGDState", "adaptive_weights", "lpld_loss", "total_loss", "sgd_step",
           "ema_update", "adapt_epoch", "adapt", "pretrain", "LossParts"]
