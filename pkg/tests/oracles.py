"""Independent reference implementations and generated corpora for the tests."""

import numpy as np

from stndet.boxes import BBox, Detection


def ref_iou(a, b):
    ax1, ay1, ax2, ay2 = a.cx - a.w / 2, a.cy - a.h / 2, a.cx + a.w / 2, a.cy + a.h / 2
    bx1, by1, bx2, by2 = b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def ref_match(dets, gts, thr):
    """Returns TP flags in (score desc, index) order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = set()
    flags = []
    for i in order:
        cands = [(ref_iou(dets[i].bbox, g), j) for j, g in enumerate(gts)
                 if j not in taken and g.class_id == dets[i].bbox.class_id]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            best = max(cands, key=lambda c: (c[0], -c[1]))
            taken.add(best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags, [dets[i].score for i in order]


def ref_ap(all_dets, all_gts, thr, cls):
    rows, n_gt = [], 0
    for img, (d, g) in enumerate(zip(all_dets, all_gts)):
        d = [x for x in d if x.bbox.class_id == cls]
        g = [x for x in g if x.class_id == cls]
        n_gt += len(g)
        flags, scores = ref_match(d, g, thr)
        rows += [(-s, img, r, f) for r, (f, s) in enumerate(zip(flags, scores))]
    rows.sort()
    if n_gt == 0:
        return 1.0 if not rows else 0.0
    tp = fp = 0
    curve = []
    for *_, f in rows:
        tp += f
        fp += not f
        curve.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        ps = [p for rc, p in curve if rc >= r - 1e-12]
        total += max(ps) if ps else 0.0
    return total / 101


def random_scene(rng, n_img=3, n_cls=2):
    dets, gts = [], []
    for _ in range(n_img):
        g = []
        for _ in range(rng.integers(0, 7)):
            w, h = rng.uniform(0.05, 0.4, 2)
            g.append(BBox(int(rng.integers(n_cls)), rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h))
        d = []
        for _ in range(rng.integers(0, 7)):
            if g and rng.random() < 0.6:
                src = g[rng.integers(len(g))]
                jit = rng.normal(scale=0.03, size=4)
                w, h = max(src.w + jit[2], 0.02), max(src.h + jit[3], 0.02)
                cx = float(np.clip(src.cx + jit[0], w / 2, 1 - w / 2))
                cy = float(np.clip(src.cy + jit[1], h / 2, 1 - h / 2))
                cls = src.class_id if rng.random() < 0.9 else int(rng.integers(n_cls))
            else:
                w, h = rng.uniform(0.05, 0.4, 2)
                cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
                cls = int(rng.integers(n_cls))
            # coarse scores force ties
            d.append(Detection(BBox(cls, cx, cy, w, h), float(np.round(rng.random(), 1))))
        dets.append(d)
        gts.append(g)
    return dets, gts


def label_corpus(n_files=50, seed=0):
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n_files):
        lines = []
        for _ in range(rng.integers(0, 6)):
            w, h = rng.uniform(0.01, 0.5, 2)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            fmt = ["{:.6f}", "{:.3f}", "{!r}", "{:.9f}"][rng.integers(4)]
            sep = [" ", "  ", "\t"][rng.integers(3)]
            lines.append(sep.join([str(rng.integers(3))] + [fmt.format(float(v)) for v in (cx, cy, w, h)]))
        texts.append("\n".join(lines) + ("\n" if rng.random() < 0.5 else ""))
    return texts
