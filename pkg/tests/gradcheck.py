"""Miniature detector instances for finite-difference gradient checks."""

from __future__ import annotations

from collections import namedtuple

import numpy as np

from lpld.detector import DetectorConfig, DetectorParams
from lpld.pseudolabel import LowConfLabel
from lpld.roifeat import FeatureMap
from lpld.scorealg import softmax

from oracles import central_difference, rel_err

Label = namedtuple("Label", "box class_id")

FD_STEP = 1e-5
REL_TOL = 1e-4


def mini_config(**kw) -> DetectorConfig:
    # 2x2 cells x 2 scales = 8 anchors, all kept
    base = dict(num_classes=3, channels=4, pooled=2, anchor_scales=(6.0, 9.0), top_k=16)
    base.update(kw)
    return DetectorConfig(**base)


def mini_instance(seed: int, n_labels: int = 2, n_lpl: int = 3, **cfg_kw):
    rng = np.random.default_rng(seed)
    cfg = mini_config(**cfg_kw)
    fm = FeatureMap(rng.normal(0, 1, (cfg.channels, 2, 2)), 4.0)
    params = DetectorParams.random(cfg, rng, std=0.3)
    labels = []
    for _ in range(n_labels):
        c = rng.uniform(2, 6, 2)
        s = rng.uniform(4, 9, 2)
        labels.append(Label((c[0] - s[0] / 2, c[1] - s[1] / 2, c[0] + s[0] / 2, c[1] + s[1] / 2),
                            int(rng.integers(cfg.num_classes))))
    lpl = []
    for j in range(n_lpl):
        xy = rng.uniform(0, 4, 2)
        wh = rng.uniform(2, 5, 2)
        box = (xy[0], xy[1], xy[0] + wh[0], xy[1] + wh[1])
        refined = tuple(np.asarray(box) + rng.normal(0, 0.3, 4))
        amp = softmax(rng.normal(0, 2, cfg.num_classes))
        lpl.append(LowConfLabel(box, amp, j, refined))
    alpha = rng.uniform(0.05, 1.5, n_lpl)
    return cfg, fm, params, labels, lpl, alpha


def check_gradient(loss_and_grads, params: DetectorParams) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grads(params)
    x0 = params.flat()
    numeric = central_difference(lambda v: loss_and_grads(params.with_flat(v))[0], x0, FD_STEP)
    return rel_err(grads.flat(), numeric, floor=1e-4)
