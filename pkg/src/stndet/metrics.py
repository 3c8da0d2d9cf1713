"""Detection metrics: greedy matching, precision/recall, COCO-style 101-point AP."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import BBox, Detection, boxes_to_array, iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.96, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MatchResult:
    """Outcome of matching one image's detections (in descending score order) to its ground truth."""

    tp: list[bool]
    matched_gt: list[int | None]
    scores: list[float]
    n_gt: int
    iou_thresh: float

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return self.n_gt - self.n_tp


def _score_order(dets: list[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets: list[Detection], gts: list[BBox], iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching: each detection, best score first, takes the highest-IoU
    unmatched same-class ground truth with IoU >= ``iou_thresh``."""
    order = _score_order(dets)
    ious = iou_matrix(boxes_to_array([dets[i].bbox for i in order]), boxes_to_array(gts)) if dets and gts else None
    used = [False] * len(gts)
    tp, matched, scores = [], [], []
    for row, i in enumerate(order):
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if used[j] or g.class_id != d.class_id:
                continue
            v = ious[row, j]
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used[best] = True
        tp.append(best is not None)
        matched.append(best)
        scores.append(d.score)
    return MatchResult(tp, matched, scores, len(gts), iou_thresh)


def precision_recall(m: MatchResult | list[MatchResult]) -> tuple[float, float]:
    """Precision (1.0 without detections) and recall (1.0 without ground truth)."""
    ms = m if isinstance(m, list) else [m]
    tp = sum(x.n_tp for x in ms)
    fp = sum(x.n_fp for x in ms)
    fn = sum(x.n_fn for x in ms)
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return p, r


def interpolated_ap(tp_flags, n_gt: int) -> float:
    """101-point interpolated AP from TP flags already sorted by descending score."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return 1.0 if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    tps = np.cumsum(tp_flags)
    fps = np.cumsum(~tp_flags)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets: list[list[Detection]], gts: list[list[BBox]], iou_thresh: float = 0.5,
                      class_id: int | None = None) -> float:
    """AP over a set of images, optionally restricted to one class."""
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different numbers of images")
    flags, keys = [], []
    n_gt = 0
    for img, (d_img, g_img) in enumerate(zip(dets, gts)):
        if class_id is not None:
            d_img = [d for d in d_img if d.class_id == class_id]
            g_img = [g for g in g_img if g.class_id == class_id]
        n_gt += len(g_img)
        m = match_detections(d_img, g_img, iou_thresh)
        for rank, (flag, score) in enumerate(zip(m.tp, m.scores)):
            flags.append(flag)
            keys.append((-score, img, rank))
    order = sorted(range(len(flags)), key=lambda i: keys[i])
    return interpolated_ap([flags[i] for i in order], n_gt)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    conf_thresh: float = 0.25
    augment: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_text(self) -> str:
        head = f"{'Precision':>10} {'Recall':>10} {'mAP@0.5':>10} {'mAP@0.5:0.95':>13}"
        row = f"{self.precision * 100:>10.2f} {self.recall * 100:>10.2f} {self.map50 * 100:>10.2f} {self.map50_95 * 100:>13.2f}"
        return head + "\n" + row + "\n"


def evaluate(dets: list[list[Detection]], gts: list[list[BBox]], conf_thresh: float = 0.25,
             n_classes: int | None = None) -> MetricsReport:
    """Precision/recall at ``conf_thresh`` (IoU 0.5), plus class-averaged mAP@0.5 and mAP@0.5:0.95.

    mAP averages over classes present in the ground truth or the detections.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different numbers of images")
    seen = {g.class_id for img in gts for g in img} | {d.class_id for img in dets for d in img}
    if n_classes is not None:
        bad = [c for c in seen if c >= n_classes]
        if bad:
            raise ValueError(f"class ids {sorted(bad)} outside vocabulary of {n_classes}")
    kept = [[d for d in img if d.score >= conf_thresh] for img in dets]
    matches = [match_detections(d, g, 0.5) for d, g in zip(kept, gts)]
    p, r = precision_recall(matches)
    per_class = {}
    for c in sorted(seen):
        ap50 = average_precision(dets, gts, 0.5, c)
        aps = [ap50] + [average_precision(dets, gts, float(t), c) for t in IOU_THRESHOLDS[1:]]
        per_class[str(c)] = {"ap50": ap50, "ap50_95": float(np.mean(aps))}
    map50 = float(np.mean([v["ap50"] for v in per_class.values()])) if per_class else 1.0
    map50_95 = float(np.mean([v["ap50_95"] for v in per_class.values()])) if per_class else 1.0
    counts = {
        "tp": sum(m.n_tp for m in matches),
        "fp": sum(m.n_fp for m in matches),
        "fn": sum(m.n_fn for m in matches),
        "detections": sum(len(d) for d in dets),
        "ground_truth": sum(len(g) for g in gts),
        "images": len(gts),
    }
    return MetricsReport(p, r, map50, map50_95, per_class, counts, conf_thresh)
