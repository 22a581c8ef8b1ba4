"""Detection metrics and pseudo-label diagnostics.

Detections are ``(boxes (N, 4), classes (N,), scores (N,))`` triples, one per
scene; ground truth is a list of objects carrying ``box``, ``class_id`` and
``size_bucket``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import boxgeom
from .detector import ProposalSet
from .scorealg import amplify, foreground
from .simdata import SIZE_BUCKETS

MATCH_IOU = 0.5


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    if len(gts) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return (np.asarray([tuple(g.box) for g in gts], dtype=np.float64),
            np.asarray([g.class_id for g in gts], dtype=np.int64))


def greedy_match(boxes, classes, scores, gts, iou_thresh: float = MATCH_IOU):
    """Match detections (descending score) to unmatched same-class GT of highest IoU.

    Returns ``(det_tp (N,) bool, gt_matched (G,) bool)``.
    """
    boxes = boxgeom.as_boxes(boxes)
    classes = np.asarray(classes, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    gboxes, gcls = _gt_arrays(gts)
    tp = np.zeros(len(boxes), dtype=bool)
    used = np.zeros(len(gboxes), dtype=bool)
    if len(boxes) == 0 or len(gboxes) == 0:
        return tp, used
    ious = boxgeom.iou_matrix(boxes, gboxes)
    ious[classes[:, None] != gcls[None, :]] = -1.0
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(used, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            tp[i] = True
            used[j] = True
    return tp, used


def all_point_ap(tp_sorted: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope of a ranked TP/FP list."""
    if n_gt == 0:
        return float("nan")
    if len(tp_sorted) == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalRecord:
    num_classes: int
    ap: list[float | None]
    mAP: float
    score_threshold: float
    tp: list[int]
    fp: list[int]
    fn: list[int]
    bucket_tp: dict[str, int]
    bucket_fn: dict[str, int]
    fnr_bucket: dict[str, float | None]
    fnr_group: dict[str, float | None]
    fnr_class: list[float | None]
    labels: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = []
        for c in range(self.num_classes):
            rows.append({"kind": "class", "key": str(c), "ap50": _fmt(self.ap[c]), "tp": self.tp[c],
                         "fp": self.fp[c], "fn": self.fn[c], "fnr": _fmt(self.fnr_class[c]),
                         "score_threshold": self.score_threshold})
        for b in SIZE_BUCKETS:
            rows.append({"kind": "bucket", "key": b, "ap50": "", "tp": self.bucket_tp[b], "fp": "",
                         "fn": self.bucket_fn[b], "fnr": _fmt(self.fnr_bucket[b]),
                         "score_threshold": self.score_threshold})
        for g, v in self.fnr_group.items():
            rows.append({"kind": "group", "key": g, "ap50": "", "tp": "", "fp": "", "fn": "", "fnr": _fmt(v),
                         "score_threshold": self.score_threshold})
        rows.append({"kind": "summary", "key": "mAP", "ap50": _fmt(self.mAP), "tp": sum(self.tp),
                     "fp": sum(self.fp), "fn": sum(self.fn), "fnr": "", "score_threshold": self.score_threshold})
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.csv_rows(), EVAL_COLUMNS)


EVAL_COLUMNS = ("kind", "key", "ap50", "tp", "fp", "fn", "fnr", "score_threshold")


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def ap50(per_scene: Sequence[tuple], num_classes: int, iou_thresh: float = MATCH_IOU):
    """Per-class all-point AP and mAP over classes that have ground truth.

    ``per_scene`` is a sequence of ``((boxes, classes, scores), gts)``.
    """
    flags = [[] for _ in range(num_classes)]
    confs = [[] for _ in range(num_classes)]
    n_gt = np.zeros(num_classes, dtype=np.int64)
    for (boxes, classes, scores), gts in per_scene:
        tp, _ = greedy_match(boxes, classes, scores, gts, iou_thresh)
        classes = np.asarray(classes, dtype=np.int64)
        for c in range(num_classes):
            sel = classes == c
            flags[c].append(tp[sel])
            confs[c].append(np.asarray(scores, dtype=np.float64)[sel])
        for g in gts:
            n_gt[g.class_id] += 1
    ap = []
    for c in range(num_classes):
        f = np.concatenate(flags[c]) if flags[c] else np.zeros(0, dtype=bool)
        s = np.concatenate(confs[c]) if confs[c] else np.zeros(0)
        order = np.argsort(-s, kind="stable")
        ap.append(all_point_ap(f[order], int(n_gt[c])))
    present = [a for a, n in zip(ap, n_gt) if n > 0]
    mAP = float(np.mean(present)) if present else float("nan")
    return [None if np.isnan(a) else a for a in ap], mAP


def _rate(fn: int, tp: int) -> float | None:
    return fn / (fn + tp) if fn + tp > 0 else None


def evaluate(per_scene: Sequence[tuple], num_classes: int, minor_classes: Sequence[int] = (),
             score_threshold: float = 0.5, iou_thresh: float = MATCH_IOU) -> EvalRecord:
    """AP50 over all detections plus TP/FP/FN counts at ``score_threshold``."""
    ap, mAP = ap50(per_scene, num_classes, iou_thresh)
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    btp = {b: 0 for b in SIZE_BUCKETS}
    bfn = {b: 0 for b in SIZE_BUCKETS}
    for (boxes, classes, scores), gts in per_scene:
        keep = np.asarray(scores) >= score_threshold
        classes = np.asarray(classes, dtype=np.int64)
        det_tp, matched = greedy_match(np.asarray(boxes)[keep] if len(boxes) else boxes, classes[keep],
                                       np.asarray(scores)[keep], gts, iou_thresh)
        for c, hit in zip(classes[keep], det_tp):
            (tp if hit else fp)[c] += 1
        for g, hit in zip(gts, matched):
            if not hit:
                fn[g.class_id] += 1
                bfn[g.size_bucket] += 1
            else:
                btp[g.size_bucket] += 1
    # tp counted from detections equals matched GT count
    minor = set(int(c) for c in minor_classes)
    groups = {"major": [c for c in range(num_classes) if c not in minor], "minor": sorted(minor)}
    fnr_group = {g: _rate(int(fn[cs].sum()), int(tp[cs].sum())) if cs else None for g, cs in groups.items()}
    return EvalRecord(num_classes, ap, mAP, float(score_threshold), tp.tolist(), fp.tolist(), fn.tolist(),
                      btp, bfn, {b: _rate(bfn[b], btp[b]) for b in SIZE_BUCKETS}, fnr_group,
                      [_rate(int(fn[c]), int(tp[c])) for c in range(num_classes)])


def fnr_buckets(per_scene: Sequence[tuple], num_classes: int, minor_classes: Sequence[int] = (),
                score_threshold: float = 0.5) -> dict:
    rec = evaluate(per_scene, num_classes, minor_classes, score_threshold)
    return {"bucket": rec.fnr_bucket, "group": rec.fnr_group, "class": rec.fnr_class,
            "score_threshold": rec.score_threshold}


def tp_fn_scatter(per_scene: Sequence[tuple], score_threshold: float = 0.5) -> list[dict]:
    """One row per GT instance: width, height, class, bucket and whether it was found."""
    rows = []
    for (boxes, classes, scores), gts in per_scene:
        keep = np.asarray(scores) >= score_threshold
        _, matched = greedy_match(np.asarray(boxes)[keep] if len(boxes) else boxes,
                                  np.asarray(classes)[keep], np.asarray(scores)[keep], gts)
        for g, hit in zip(gts, matched):
            x1, y1, x2, y2 = g.box
            rows.append({"width": x2 - x1, "height": y2 - y1, "class_id": g.class_id, "size_bucket": g.size_bucket,
                         "status": "TP" if hit else "FN"})
    return rows


# -- proposal diagnostics -----------------------------------------------------

@dataclass
class HistogramGrid:
    bins: int
    counts: np.ndarray  # (conf_bins, iou_bins)

    @classmethod
    def empty(cls, bins: int = 50) -> "HistogramGrid":
        return cls(bins, np.zeros((bins, bins), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "HistogramGrid") -> "HistogramGrid":
        return HistogramGrid(self.bins, self.counts + other.counts)

    def csv_rows(self) -> list[dict]:
        b = self.bins
        return [{"conf_bin": i, "iou_bin": j, "conf_lo": i / b, "conf_hi": (i + 1) / b, "iou_lo": j / b,
                 "iou_hi": (j + 1) / b, "count": int(self.counts[i, j])} for i in range(b) for j in range(b)]

    def to_csv(self) -> str:
        return rows_to_csv(self.csv_rows(), HIST_COLUMNS)

    def to_dict(self) -> dict:
        return {"bins": self.bins, "counts": self.counts.tolist()}


HIST_COLUMNS = ("conf_bin", "iou_bin", "conf_lo", "conf_hi", "iou_lo", "iou_hi", "count")


def _bin(x: np.ndarray, bins: int) -> np.ndarray:
    return np.clip((np.asarray(x) * bins).astype(np.int64), 0, bins - 1)


def proposal_confidence(props: ProposalSet) -> np.ndarray:
    return foreground(props.scores).max(axis=1) if len(props) else np.zeros(0)


def max_iou_with_gt(boxes, gts) -> np.ndarray:
    gboxes, _ = _gt_arrays(gts)
    boxes = boxgeom.as_boxes(boxes)
    if len(gboxes) == 0:
        return np.zeros(len(boxes))
    return boxgeom.iou_matrix(boxes, gboxes).max(axis=1)


def conf_iou_histogram(props: ProposalSet, gts, bins: int = 50) -> HistogramGrid:
    conf = proposal_confidence(props)
    ious = max_iou_with_gt(props.boxes, gts)
    grid = np.zeros((bins, bins), dtype=np.int64)
    np.add.at(grid, (_bin(conf, bins), _bin(ious, bins)), 1)
    return HistogramGrid(bins, grid)


def aligned_flags(boxes, labels: np.ndarray, gts, iou_thresh: float = MATCH_IOU) -> np.ndarray:
    """Whether each box's predicted class equals that of its best-overlap GT (IoU >= threshold)."""
    gboxes, gcls = _gt_arrays(gts)
    boxes = boxgeom.as_boxes(boxes)
    if len(boxes) == 0 or len(gboxes) == 0:
        return np.zeros(len(boxes), dtype=bool)
    ious = boxgeom.iou_matrix(boxes, gboxes)
    best = ious.argmax(axis=1)
    return (ious[np.arange(len(boxes)), best] >= iou_thresh) & (gcls[best] == np.asarray(labels))


def stage_alignment_counts(props: ProposalSet, stages: dict[str, np.ndarray], gts) -> dict[str, tuple[int, int]]:
    """``(aligned, total)`` per mining stage for one scene."""
    out = {}
    for name, idx in stages.items():
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            out[name] = (0, 0)
            continue
        scores = props.scores[idx]
        labels = amplify(scores).argmax(axis=1) if name == "lc" else foreground(scores).argmax(axis=1)
        flags = aligned_flags(props.boxes[idx], labels, gts)
        out[name] = (int(flags.sum()), len(idx))
    return out


def class_alignment_ratio(counts: Sequence[dict[str, tuple[int, int]]]) -> dict[str, float | None]:
    """Pool per-scene ``(aligned, total)`` counts into one ratio per stage."""
    totals: dict[str, list[int]] = {}
    for c in counts:
        for name, (a, n) in c.items():
            t = totals.setdefault(name, [0, 0])
            t[0] += a
            t[1] += n
    return {name: (a / n if n else None) for name, (a, n) in totals.items()}
