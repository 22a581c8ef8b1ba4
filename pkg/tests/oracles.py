"""Independent reference implementations used as test oracles.

Everything here is written in plain Python loops over scalars so it shares no
code path with the vectorized package implementation.
"""

from __future__ import annotations

import math

import numpy as np


def pixel_iou(a, b, step: float = 0.01) -> float:
    """IoU by counting the centers of a fine grid of cells inside each box."""
    lo_x, hi_x = min(a[0], b[0]), max(a[2], b[2])
    lo_y, hi_y = min(a[1], b[1]), max(a[3], b[3])
    xs = np.arange(lo_x + step / 2, hi_x, step)
    ys = np.arange(lo_y + step / 2, hi_y, step)
    X, Y = np.meshgrid(xs, ys)
    in_a = (X >= a[0]) & (X < a[2]) & (Y >= a[1]) & (Y < a[3])
    in_b = (X >= b[0]) & (X < b[2]) & (Y >= b[1]) & (Y < b[3])
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def scalar_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def reference_nms(boxes, scores, thresh: float) -> list[int]:
    """Exhaustive NMS: box i survives iff no surviving higher-ranked box overlaps it above ``thresh``."""
    n = len(scores)
    rank = sorted(range(n), key=lambda i: (-float(scores[i]), i))
    kept = []
    for i in rank:
        if all(scalar_iou(boxes[i], boxes[k]) <= thresh for k in kept):
            kept.append(i)
    return kept


def reference_hpl(boxes, scores, delta_hc, nms_iou, pre_nms_score, renormalize=False, classwise=True):
    """Indices of HPL proposals, in descending confidence, by naive composition of the four steps."""
    n = len(scores)
    if n == 0:
        return []
    C = len(scores[0]) - 1
    conf, cls = [], []
    for j in range(n):
        fg = [float(v) for v in scores[j][:C]]
        if renormalize:
            s = sum(fg)
            fg = [v / s for v in fg] if s > 0 else [0.0] * C
        c = max(range(C), key=lambda k: (fg[k], -k))
        conf.append(fg[c])
        cls.append(c)
    survivors = [j for j in range(n) if conf[j] >= pre_nms_score]
    kept = []
    for c in sorted({cls[j] for j in survivors}) if classwise else [None]:
        members = [j for j in survivors if c is None or cls[j] == c]
        order = reference_nms([boxes[j] for j in members], [conf[j] for j in members], nms_iou)
        kept.extend(members[k] for k in order)
    kept.sort(key=lambda j: (-conf[j], j))
    return [j for j in kept if conf[j] > delta_hc]


def reference_lpl(boxes, scores, hpl_boxes, delta_iou, delta_bg, delta_lc) -> list[int]:
    out = []
    for j in range(len(scores)):
        if any(scalar_iou(boxes[j], h) >= delta_iou for h in hpl_boxes):
            continue
        bg = float(scores[j][-1])
        if not bg < delta_bg:
            continue
        fg = [float(v) for v in scores[j][:-1]]
        mass = sum(fg)
        if max(v / mass for v in fg) > delta_lc:
            out.append(j)
    return out


def reference_ap(dets, gts, iou_thresh: float = 0.5) -> float:
    """Single-class AP over one scene: greedy matching then all-point interpolated PR area.

    ``dets`` is a list of ``(box, score)``; ``gts`` a list of boxes.
    """
    if not gts:
        return float("nan")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = [False] * len(gts)
    hits = []
    for i in order:
        best, best_iou = None, -1.0
        for g, gb in enumerate(gts):
            if used[g]:
                continue
            v = scalar_iou(dets[i][0], gb)
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= iou_thresh:
            used[best] = True
            hits.append(True)
        else:
            hits.append(False)
    points = []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        points.append((tp / len(gts), tp / k))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        p = max(pp for rr, pp in points if rr >= r)
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def kl_scalar(p, q, eps: float = 1e-12) -> float:
    total = 0.0
    for a, b in zip(p, q):
        if a > 0:
            total += a * (math.log(max(a, eps)) - math.log(max(b, eps)))
    return total


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor for near-zero entries."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
