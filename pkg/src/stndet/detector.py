"""Miniature anchor-free single-stage detector with CIOU + DFL box loss.

The backbone has five stride-2 stages; the stride 8/16/32 outputs feed
unshared per-level heads. Each head cell predicts class logits and, for
each box side (left, top, right, bottom), a distribution over
``reg_max + 1`` integer distances measured in stride units from the cell
center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .boxes import BBox, BoxError, Detection, iou_matrix
from .nn import Conv2d, Module
from .stn import LocalizationNet, localize, theta_to_pixel, warp
from .tensor import Tensor, arctan, clamp_min, concat, maximum, minimum, no_grad

STRIDES = (8, 16, 32)
# assignment thresholds on max(w, h) as a fraction of the image (64 px and 128 px at a 256 px reference)
LEVEL_LIMITS = (64 / 256, 128 / 256)


@dataclass
class DetectorConfig:
    n_classes: int = 1
    reg_max: int = 8
    widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    head_width: int = 32
    stn_enabled: bool = False
    stn_pool_size: int = 28
    cls_prior: float = 0.01

    @property
    def out_width(self) -> int:
        return self.n_classes + 4 * (self.reg_max + 1)


@dataclass
class LossWeights:
    cls: float = 0.5
    box: float = 7.5
    dfl: float = 1.5


# -- network ------------------------------------------------------------------------


class Backbone(Module):
    def __init__(self, widths=(16, 32, 64, 128, 128), rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.down = []
        self.refine = []
        c_in = 3
        for c in widths:
            self.down.append(Conv2d(c_in, c, 3, stride=2, padding=1, rng=rng, dtype=dtype))
            self.refine.append(Conv2d(c, c, 3, stride=1, padding=1, rng=rng, dtype=dtype))
            c_in = c
        self.widths = tuple(widths)

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"image dims must be divisible by 32, got {x.shape[2]}x{x.shape[3]}")
        feats = []
        for down, refine in zip(self.down, self.refine):
            x = F.relu(refine(F.relu(down(x))))
            feats.append(x)
        # stages 3..5 sit at strides 8, 16, 32
        return feats[2:5]


def backbone_forward(backbone: Backbone, image: Tensor) -> list[Tensor]:
    return backbone(image)


@dataclass
class HeadOutput:
    """Raw per-level predictions, each (N, n_classes + 4 (reg_max + 1), h, w)."""

    levels: list[Tensor]
    n_classes: int
    reg_max: int
    strides: tuple[int, ...] = STRIDES

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    @property
    def grid_shapes(self) -> list[tuple[int, int]]:
        return [lvl.shape[2:] for lvl in self.levels]

    def flat(self) -> Tensor:
        """All cells concatenated fine to coarse: (N, A, out_width)."""
        parts = []
        for lvl in self.levels:
            n, d, h, w = lvl.shape
            parts.append(lvl.reshape(n, d, h * w).transpose(0, 2, 1))
        return concat(parts, axis=1)


class Head(Module):
    def __init__(self, in_channels, cfg: DetectorConfig, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = cfg.n_classes
        self.reg_max = cfg.reg_max
        hw = cfg.head_width
        self.cls_hidden, self.cls_out, self.box_hidden, self.box_out = [], [], [], []
        prior_bias = -np.log((1 - cfg.cls_prior) / cfg.cls_prior)
        for c in in_channels:
            self.cls_hidden.append(Conv2d(c, hw, 3, rng=rng, dtype=dtype))
            out = Conv2d(hw, cfg.n_classes, 1, rng=rng, dtype=dtype)
            out.weight.data *= 0.01
            out.bias.data[...] = prior_bias
            self.cls_out.append(out)
            self.box_hidden.append(Conv2d(c, hw, 3, rng=rng, dtype=dtype))
            self.box_out.append(Conv2d(hw, 4 * (cfg.reg_max + 1), 1, rng=rng, dtype=dtype))

    def forward(self, feats: list[Tensor]) -> HeadOutput:
        levels = []
        for i, f in enumerate(feats):
            cls = self.cls_out[i](F.relu(self.cls_hidden[i](f)))
            box = self.box_out[i](F.relu(self.box_hidden[i](f)))
            levels.append(concat([cls, box], axis=1))
        return HeadOutput(levels, self.n_classes, self.reg_max)


def head_forward(head: Head, feats: list[Tensor]) -> HeadOutput:
    if len(feats) != len(STRIDES):
        raise ValueError(f"expected {len(STRIDES)} pyramid levels, got {len(feats)}")
    for a, b in zip(feats, feats[1:]):
        if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ValueError("pyramid levels must be ordered fine to coarse, halving each time")
    return head(feats)


class Detector(Module):
    """Optional spatial transformer in front of backbone + head."""

    def __init__(self, cfg: DetectorConfig | None = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg if cfg is not None else DetectorConfig()
        rng = np.random.default_rng(seed)
        self.stn = LocalizationNet(self.cfg.stn_pool_size, rng=rng, dtype=dtype) if self.cfg.stn_enabled else None
        self.backbone = Backbone(self.cfg.widths, rng=rng, dtype=dtype)
        self.head = Head(self.cfg.widths[2:5], self.cfg, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.backbone.down[0].weight.dtype

    def forward(self, images: Tensor) -> tuple[HeadOutput, np.ndarray | None]:
        """Head output plus the affine parameters used by the transformer (None without one)."""
        theta = None
        if self.stn is not None:
            theta_t = localize(self.stn, images)
            images = warp(images, theta_t)
            theta = theta_t.data
        return self.head(self.backbone(images)), theta


# -- geometry -------------------------------------------------------------------


def anchor_points(grid_shapes, strides=STRIDES) -> tuple[np.ndarray, np.ndarray]:
    """Cell centers in pixels (A, 2) and the stride of each cell (A,)."""
    pts, strd = [], []
    for (h, w), s in zip(grid_shapes, strides):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strd.append(np.full(h * w, s, dtype=np.float64))
    return np.concatenate(pts), np.concatenate(strd)


def pyramid_geometry(image_size: tuple[int, int], strides=STRIDES) -> list[tuple[int, int]]:
    h, w = image_size
    return [(h // s, w // s) for s in strides]


def level_for_box(box: BBox) -> int:
    size = max(box.w, box.h)
    for i, limit in enumerate(LEVEL_LIMITS):
        if size < limit:
            return i
    return len(LEVEL_LIMITS)


@dataclass
class Targets:
    """Per-cell training targets for a batch; A cells per image."""

    cls: np.ndarray  # (N, A, n_classes) one-hot, zero for background
    pos: np.ndarray  # (N, A) bool
    dist: np.ndarray  # (N, A, 4) side distances l, t, r, b in stride units
    box: np.ndarray  # (N, A, 4) ground-truth corners in pixels
    owner: np.ndarray = field(default=None)  # (N, A) index of the assigned ground truth, -1 if none


def assign_targets(gts: list[list[BBox]], image_size: tuple[int, int], n_classes: int = 1, reg_max: int = 8,
                   strides=STRIDES) -> Targets:
    """Center-cell assignment: each box goes to the cell holding its center on the level picked by its size.

    When two boxes claim one cell, the smaller box keeps it (earlier index on ties).
    Side distances are clipped to ``[0, reg_max - 0.01]``.
    """
    h_img, w_img = image_size
    shapes = pyramid_geometry(image_size, strides)
    anchors, cell_stride = anchor_points(shapes, strides)
    offsets = np.cumsum([0] + [a * b for a, b in shapes])
    n, a = len(gts), len(anchors)
    cls = np.zeros((n, a, n_classes))
    pos = np.zeros((n, a), dtype=bool)
    dist = np.zeros((n, a, 4))
    box = np.zeros((n, a, 4))
    owner = np.full((n, a), -1, dtype=np.int64)
    for b, boxes in enumerate(gts):
        best_area = {}
        for k, g in enumerate(boxes):
            if g.w <= 0 or g.h <= 0:
                raise BoxError("zero-area ground truth")
            if g.class_id >= n_classes:
                raise BoxError(f"class id {g.class_id} >= n_classes {n_classes}")
            lvl = level_for_box(g)
            gh, gw = shapes[lvl]
            s = strides[lvl]
            j = min(int(g.cx * w_img // s), gw - 1)
            i = min(int(g.cy * h_img // s), gh - 1)
            cell = offsets[lvl] + i * gw + j
            if cell in best_area and best_area[cell] <= g.area:
                continue
            best_area[cell] = g.area
            x1, y1, x2, y2 = (g.cx - g.w / 2) * w_img, (g.cy - g.h / 2) * h_img, \
                             (g.cx + g.w / 2) * w_img, (g.cy + g.h / 2) * h_img
            ax, ay = anchors[cell]
            d = np.array([ax - x1, ay - y1, x2 - ax, y2 - ay]) / s
            cls[b, cell] = 0.0
            cls[b, cell, g.class_id] = 1.0
            pos[b, cell] = True
            dist[b, cell] = np.clip(d, 0.0, reg_max - 0.01)
            box[b, cell] = (x1, y1, x2, y2)
            owner[b, cell] = k
    return Targets(cls, pos, dist, box, owner)


# -- losses -------------------------------------------------------------------------

_FOUR_OVER_PI2 = 4.0 / np.pi**2


def ciou_xyxy(pred: Tensor, gt, eps: float = 1e-9, aspect_eps: float = 0.0) -> Tensor:
    """Complete IoU between rows of corner-form boxes (K, 4); returns (K,).

    CIOU = IoU - rho^2 / c^2 - alpha * v, with v the arctan aspect mismatch
    and alpha = v / ((1 - IoU) + v + eps). ``aspect_eps`` guards w/h when
    predicted heights can collapse to zero.
    """
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (g[:, i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    iw = clamp_min(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = clamp_min(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    c2 = cw * cw + ch * ch
    dx = (px1 + px2) * 0.5 - (gx1 + gx2) * 0.5
    dy = (py1 + py2) * 0.5 - (gy1 + gy2) * 0.5
    rho2 = dx * dx + dy * dy
    diff = arctan(gw / (gh + aspect_eps)) - arctan(pw / (ph + aspect_eps))
    v = diff * diff * _FOUR_OVER_PI2
    alpha = v / ((1.0 - iou) + v + eps)
    return iou - rho2 / c2 - alpha * v


def ciou(pred: BBox, gt: BBox) -> float:
    """CIOU of two boxes, in (-1, 1]; the regression loss is ``1 - ciou``."""
    p = Tensor(np.array([pred.xyxy]))
    g = Tensor(np.array([gt.xyxy]))
    return float(ciou_xyxy(p, g).data[0])


def dfl_loss(dist_logits: Tensor, target) -> Tensor:
    """Distribution focal loss over the last axis of ``dist_logits``.

    Cross-entropy against the two bins bracketing ``target``, weighted by
    proximity; integer targets reduce to cross-entropy on a single bin.
    Returns one loss per target.
    """
    n_bins = dist_logits.shape[-1]
    t = np.asarray(target, dtype=np.float64)
    if t.shape != dist_logits.shape[:-1]:
        raise ValueError(f"target shape {t.shape} != logits batch shape {dist_logits.shape[:-1]}")
    if np.any(t < 0) or np.any(t > n_bins - 1) or not np.all(np.isfinite(t)):
        raise ValueError(f"DFL target out of range [0, {n_bins - 1}]")
    left = np.floor(t).astype(np.int64)
    w_right = t - left
    w_left = 1.0 - w_right
    right = np.minimum(left + 1, n_bins - 1)
    logp = F.log_softmax(dist_logits, axis=-1)
    flat = logp.reshape(-1, n_bins)
    rows = np.arange(flat.shape[0])
    lp_left = flat[rows, left.ravel()].reshape(t.shape)
    lp_right = flat[rows, right.ravel()].reshape(t.shape)
    return -(lp_left * w_left.astype(logp.dtype) + lp_right * w_right.astype(logp.dtype))


def detection_loss(head: HeadOutput, targets: Targets, weights: LossWeights | None = None,
                   return_parts: bool = False):
    """Weighted sum of classification BCE, (1 - CIOU) and DFL.

    BCE is summed over every cell and class and divided by max(#positives, 1);
    the box terms average over positive cells (and sides, for DFL) and vanish
    when there are none.
    """
    weights = weights if weights is not None else LossWeights()
    flat = head.flat()
    n, a, d = flat.shape
    nc, bins = head.n_classes, head.reg_max + 1
    if targets.cls.shape != (n, a, nc):
        raise ValueError(f"targets geometry {targets.cls.shape} != head geometry {(n, a, nc)}")
    npos = int(targets.pos.sum())
    cls_logits = flat[:, :, :nc]
    cls_loss = F.bce_with_logits(cls_logits, targets.cls).sum() * (1.0 / max(npos, 1))
    total = cls_loss * weights.cls
    parts = {"cls": float(cls_loss.data), "box": 0.0, "dfl": 0.0}
    if npos:
        b_idx, a_idx = np.nonzero(targets.pos)
        box_logits = flat[b_idx, a_idx, nc:].reshape(npos, 4, bins)
        tdist = targets.dist[b_idx, a_idx]
        dfl = dfl_loss(box_logits, tdist).mean()
        probs = F.softmax(box_logits, axis=-1)
        bin_vals = np.broadcast_to(np.arange(bins, dtype=probs.dtype), probs.shape)
        pdist = (probs * bin_vals).sum(axis=-1)
        anchors, strides = anchor_points(head.grid_shapes, head.strides)
        cx = anchors[a_idx, 0] / strides[a_idx]
        cy = anchors[a_idx, 1] / strides[a_idx]
        pred_box = concat([
            (cx - pdist[:, 0]).reshape(npos, 1), (cy - pdist[:, 1]).reshape(npos, 1),
            (cx + pdist[:, 2]).reshape(npos, 1), (cy + pdist[:, 3]).reshape(npos, 1),
        ], axis=1)
        gt_box = targets.box[b_idx, a_idx] / strides[a_idx, None]
        box_loss = (1.0 - ciou_xyxy(pred_box, gt_box, aspect_eps=1e-9)).mean()
        total = total + box_loss * weights.box + dfl * weights.dfl
        parts["box"] = float(box_loss.data)
        parts["dfl"] = float(dfl.data)
    if return_parts:
        return total, parts
    return total


# -- inference ------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; drops boxes whose IoU with a kept box exceeds ``iou_thresh``."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ious = iou_matrix(boxes[i : i + 1], boxes[order])[0]
        order = [o for o, v in zip(order, ious) if v <= iou_thresh]
    return keep


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_boxes(head: HeadOutput, image_size: tuple[int, int]):
    """Per-cell class scores (N, A, nc) and corner boxes in normalized coords (N, A, 4)."""
    data = head.flat().data.astype(np.float64)
    n, a, _ = data.shape
    nc, bins = head.n_classes, head.reg_max + 1
    scores = _sigmoid(data[:, :, :nc])
    logits = data[:, :, nc:].reshape(n, a, 4, bins)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    dist = (e / e.sum(axis=-1, keepdims=True)) @ np.arange(bins, dtype=np.float64)
    anchors, strides = anchor_points(head.grid_shapes, head.strides)
    dist = dist * strides[None, :, None]
    h, w = image_size
    boxes = np.stack([
        (anchors[None, :, 0] - dist[..., 0]) / w, (anchors[None, :, 1] - dist[..., 1]) / h,
        (anchors[None, :, 0] + dist[..., 2]) / w, (anchors[None, :, 1] + dist[..., 3]) / h,
    ], axis=-1)
    return scores, boxes


def decode_and_nms(head: HeadOutput, conf_thresh: float = 0.25, iou_thresh: float = 0.7,
                   image_size: tuple[int, int] | None = None, max_det: int = 300) -> list[list[Detection]]:
    """Detections per image, sorted by descending score, after per-class greedy NMS."""
    if not (0.0 <= conf_thresh <= 1.0 and 0.0 <= iou_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    if image_size is None:
        gh, gw = head.grid_shapes[0]
        image_size = (gh * head.strides[0], gw * head.strides[0])
    scores, boxes = decode_boxes(head, image_size)
    out = []
    for b in range(scores.shape[0]):
        out.append(_select(boxes[b], scores[b], conf_thresh, iou_thresh, max_det))
    return out


def _select(boxes, scores, conf_thresh, iou_thresh, max_det) -> list[Detection]:
    cls = scores.argmax(axis=1)
    best = scores[np.arange(len(cls)), cls]
    boxes = np.clip(boxes, 0.0, 1.0)
    ok = (best > conf_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx = np.nonzero(ok)[0]
    dets = []
    for c in np.unique(cls[idx]):
        members = idx[cls[idx] == c]
        for k in nms(boxes[members], best[members], iou_thresh):
            i = members[k]
            dets.append(Detection(BBox.from_xyxy(int(c), *boxes[i]), float(best[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_det]


def map_detections(dets: list[Detection], theta, image_size: tuple[int, int]) -> list[Detection]:
    """Carry detections from the transformer's output frame back to the input image frame.

    ``theta`` maps output coordinates to input coordinates, so each box is
    replaced by the axis-aligned hull of its mapped corners.
    """
    h, w = image_size
    m = theta_to_pixel(theta, h, w)
    out = []
    for d in dets:
        x1, y1, x2, y2 = d.bbox.xyxy
        corners = np.array([[x1 * w, y1 * h], [x2 * w, y1 * h], [x1 * w, y2 * h], [x2 * w, y2 * h]])
        mapped = corners @ m[:, :2].T + m[:, 2]
        lo = mapped.min(axis=0) / (w, h)
        hi = mapped.max(axis=0) / (w, h)
        lo, hi = np.clip(lo, 0, 1), np.clip(hi, 0, 1)
        if hi[0] > lo[0] and hi[1] > lo[1]:
            out.append(Detection(BBox.from_xyxy(d.class_id, lo[0], lo[1], hi[0], hi[1]), d.score))
    return out


def predict(model: Detector, images: Tensor, conf_thresh: float = 0.001, iou_thresh: float = 0.7) -> list[list[Detection]]:
    """Detections in input-image coordinates for each image in the batch."""
    with no_grad():
        head, theta = model(images)
    size = images.shape[2:]
    dets = decode_and_nms(head, conf_thresh, iou_thresh, size)
    if theta is not None:
        dets = [map_detections(d, theta[i], size) for i, d in enumerate(dets)]
    return dets
