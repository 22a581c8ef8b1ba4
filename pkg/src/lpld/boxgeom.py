"""Axis-aligned box geometry: area, IoU and greedy NMS.

Boxes are ``(x1, y1, x2, y2)`` in continuous scene coordinates (no ``+1``
pixel convention). Scalar helpers take a :class:`Box`; the vectorized ones
take ``(N, 4)`` float arrays and are what the rest of the package uses.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "Box":
        if not all(math.isfinite(v) for v in self):
            raise ValueError(f"non-finite box coordinates: {tuple(self)}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box: {tuple(self)}")
        return self

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def as_boxes(boxes) -> np.ndarray:
    """Coerce a box, a sequence of boxes or an array to a float64 ``(N, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def area(b: Box | Sequence[float]) -> float:
    x1, y1, x2, y2 = b
    return (x2 - x1) * (y2 - y1)


def areas(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    """Intersection over union; 0 when the union has no area."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms(boxes, scores, iou_thresh: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and drops every box
    whose IoU with it is strictly greater than ``iou_thresh``. Score ties go
    to the lower original index. Returns kept indices in descending score
    order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(boxes):
        raise ValueError("boxes and scores differ in length")
    if len(scores) == 0:
        return []
    # stable sort on -score keeps lower index first among ties
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def batched_nms(boxes, scores, groups, iou_thresh: float = 0.5) -> list[int]:
    """NMS run independently inside each group (e.g. class), merged by score."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups).reshape(-1)
    keep: list[int] = []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        keep.extend(int(idx[k]) for k in nms(boxes[idx], scores[idx], iou_thresh))
    keep.sort(key=lambda i: (-scores[i], i))
    return keep
