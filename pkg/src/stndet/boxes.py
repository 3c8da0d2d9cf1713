"""Normalized class-labeled boxes and IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Box in normalized image fractions: center (cx, cy), size (w, h)."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise BoxError(f"box must have positive size, got w={self.w} h={self.h}")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise BoxError(f"box values must lie in [0, 1], got {vals}")
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise BoxError(f"invalid class id {self.class_id}")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_xyxy(cls, class_id: int, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        x1, x2 = min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0)
        y1, y2 = min(max(y1, 0.0), 1.0), min(max(y2, 0.0), 1.0)
        return cls(int(class_id), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise BoxError(f"score must lie in [0, 1], got {self.score}")

    @property
    def class_id(self) -> int:
        return self.bbox.class_id


def iou_xyxy(a, b) -> float:
    """IoU of two corner-form boxes (x1, y1, x2, y2)."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    aw, ah = ax2 - ax1, ay2 - ay1
    bw, bh = bx2 - bx1, by2 - by1
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise BoxError("degenerate box in IoU")
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


def iou(a: BBox, b: BBox) -> float:
    return iou_xyxy(a.xyxy, b.xyxy)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    iw = np.maximum(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0)
    ih = np.maximum(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0)
    inter = iw * ih
    union = (aw * ah)[:, None] + (bw * bh)[None, :] - inter
    return inter / union


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([b.xyxy for b in boxes], dtype=np.float64).reshape(-1, 4)
