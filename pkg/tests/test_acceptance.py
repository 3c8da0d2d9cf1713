"""Acceptance criteria 1-10, one PASS/FAIL line each (see the terminal summary)."""

import math
import time

import numpy as np

from oracles import label_corpus, random_scene, ref_ap, ref_match
from stndet import explain as ex
from stndet import functional as F
from stndet.augment import AugmentSpec, augment_grid, build_affine
from stndet.boxes import BBox, iou_xyxy
from stndet.checkpoint import load_checkpoint, save_checkpoint
from stndet.config import TrainConfig
from stndet.data_io import (SpectralImage, canonical_labels, fuse_bands, load_labels, serialize_labels,
                            synth_dataset)
from stndet.detector import Detector, DetectorConfig, assign_targets, ciou, ciou_xyxy, dfl_loss, detection_loss
from stndet.gradcheck import check_gradients
from stndet.harness import compare, evaluate_model, load_model, load_split, train
from stndet.metrics import average_precision, match_detections, precision_recall
from stndet.stn import IDENTITY_THETA, LocalizationNet, generate_grid, pixel_to_theta, sample, stn_forward
from stndet.tensor import Tensor

INSTANCES = 20


def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# -- 1 ---------------------------------------------------------------------------------------


def test_criterion_1_gradients(acceptance):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}

    def run(name, make, tol=1e-4):
        errs = []
        for _ in range(INSTANCES):
            fn, inputs, kw = make()
            errs.append(check_gradients(fn, inputs, rng=rng, **kw))
        worst[name] = (max(errs), tol)

    def conv():
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = Tensor(rng.normal(size=(2, 2, 6, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        c = rng.normal(size=F.conv2d(x, w, b, stride, pad).shape)
        return lambda: F.conv2d(x, w, b, stride, pad) * c, [x, w, b], {}

    def maxpool():
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        c = rng.normal(size=(1, 2, 3, 3))
        return lambda: F.max_pool2d(x, 2) * c, [x], {}

    def adaptive():
        x = Tensor(rng.normal(size=(1, 2, 7, 5)), requires_grad=True)
        c = rng.normal(size=(1, 2, 3, 2))
        return lambda: F.adaptive_avg_pool2d(x, 3, 2) * c, [x], {}

    def elementwise(op, shape=(3, 5)):
        def make():
            x = Tensor(away_from_zero(rng, shape), requires_grad=True)
            c = rng.normal(size=shape)
            return lambda: op(x) * c, [x], {}
        return make

    def lin():
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        c = rng.normal(size=(4, 3))
        return lambda: F.linear(x, w, b) * c, [x, w, b], {}

    def grid_gen():
        theta = Tensor(IDENTITY_THETA + rng.normal(scale=0.3, size=(2, 6)), requires_grad=True)
        c = rng.normal(size=(2, 4, 5, 2))
        return lambda: generate_grid(theta, 4, 5).coords * c, [theta], {}

    def sampler():
        x = Tensor(rng.random((2, 2, 6, 5)), requires_grad=True)
        theta = Tensor(IDENTITY_THETA + rng.normal(scale=0.2, size=(2, 6)), requires_grad=True)
        c = rng.normal(size=(2, 2, 6, 5))
        return lambda: sample(x, generate_grid(theta, 6, 5)) * c, [x, theta], {}

    def ciou_op():
        xy = rng.random((3, 2)) * 0.5
        pred = Tensor(np.hstack([xy, xy + rng.random((3, 2)) * 0.5 + 0.1]), requires_grad=True)
        gxy = rng.random((3, 2)) * 0.5
        gt = np.hstack([gxy, gxy + rng.random((3, 2)) * 0.5 + 0.1])
        return lambda: ciou_xyxy(pred, gt), [pred], {}

    def dfl():
        logits = Tensor(rng.normal(size=(3, 4, 9)), requires_grad=True)
        target = rng.random((3, 4)) * 8
        return lambda: dfl_loss(logits, target), [logits], {}

    cfgs = [DetectorConfig(widths=(4, 4, 6, 6, 6), head_width=4),
            DetectorConfig(widths=(4, 4, 6, 6, 6), head_width=4, stn_enabled=True, stn_pool_size=4)]
    seeds = iter(range(1000))

    def full_loss():
        k = next(seeds)
        det = Detector(cfgs[k % 2], seed=k)
        ds = synth_dataset(k, 2, 32)
        x = Tensor(ds.images())
        t = assign_targets(ds.boxes(), (32, 32))
        params = [det.backbone.down[0].weight, det.head.box_out[0].weight, det.head.cls_out[1].bias]
        if det.stn is not None:
            # move theta off the identity so the warp is generic
            det.stn.regress.weight.data[...] = rng.normal(scale=1e-2, size=det.stn.regress.weight.shape)
            det.stn.regress.bias.data[...] += rng.normal(scale=0.05, size=6)
            params += [det.stn.regress.bias, det.stn.features.conv.weight]
        # the network is piecewise smooth (ReLU, max-pool, bilinear cells); a smaller step keeps the
        # central difference from straddling one of its many kinks
        return lambda: detection_loss(det(x)[0], t), params, {"max_coords": 6, "h": 1e-6}

    run("conv2d", conv)
    run("max_pool2d", maxpool)
    run("adaptive_avg_pool2d", adaptive)
    run("relu", elementwise(F.relu))
    run("sigmoid", elementwise(F.sigmoid))
    run("softmax", elementwise(lambda x: F.softmax(x, axis=-1)))
    run("log_softmax", elementwise(lambda x: F.log_softmax(x, axis=-1)))
    run("linear", lin)
    run("grid_generator", grid_gen)
    run("sampler", sampler)
    run("ciou", ciou_op)
    run("dfl", dfl)
    run("detection_loss", full_loss, tol=1e-3)
    elapsed = time.perf_counter() - t0
    bad = [k for k, (e, tol) in worst.items() if not e < tol]
    ok = not bad and elapsed < 120
    detail = f"{len(worst)} ops x {INSTANCES} instances, worst rel err " + \
             ", ".join(f"{k}={e:.1e}" for k, (e, _) in worst.items()) + f"; {elapsed:.0f}s"
    if bad:
        detail += f"; over tolerance: {bad}"
    assert acceptance(1, ok, detail)


# -- 2 ---------------------------------------------------------------------------------------


def test_criterion_2_stn_identity(acceptance):
    rng = np.random.default_rng(202)
    fresh_max = 0.0
    for k, (h, w) in enumerate([(56, 56), (60, 84), (64, 96), (128, 128)]):
        net = LocalizationNet(28, rng=np.random.default_rng(k))
        x = Tensor(rng.random((2, 3, h, w)))
        fresh_max = max(fresh_max, float(np.abs(stn_forward(net, x).data - x.data).max()))
        det = Detector(DetectorConfig(stn_enabled=True), seed=k)
        fresh_max = max(fresh_max, float(np.abs(stn_forward(det.stn, x).data - x.data).max()))
    exact = True
    for h, w in [(1, 1), (1, 7), (5, 1), (6, 9), (31, 17)]:
        x = Tensor(rng.normal(size=(3, 2, h, w)))
        out = sample(x, generate_grid(np.tile(IDENTITY_THETA, (3, 1)), h, w)).data
        exact &= np.array_equal(out, x.data)
    ok = fresh_max == 0.0 and exact
    assert acceptance(2, ok, f"fresh STN max abs diff {fresh_max}; identity theta bit-exact: {exact}")


# -- 3 ---------------------------------------------------------------------------------------


def test_criterion_3_inverse_rotation(acceptance, tmp_path):
    t0 = time.perf_counter()
    cfg = TrainConfig(synth_train=32, synth_test=16, batch_size=8, max_epochs=100, early_stop_patience=100,
                      max_steps=400, eval_interval=100)
    train(cfg, tmp_path)
    model, cfg = load_model(tmp_path / "last.ckpt")
    test = load_split(cfg, "test")
    clean = evaluate_model(model, test, conf_thresh=cfg.conf_thresh, iou_thresh=cfg.nms_iou)
    size = cfg.image_size
    model.stn = LocalizationNet(cfg.stn_pool_size).freeze_to(
        pixel_to_theta(build_affine(size, size, rot_deg=10.0), size, size))
    rotated = evaluate_model(model, test, AugmentSpec(rotation_deg=(10.0, 10.0)), cfg.conf_thresh, cfg.nms_iou)
    elapsed = time.perf_counter() - t0
    diffs = {k: abs(getattr(rotated, k) - getattr(clean, k)) for k in ("precision", "recall", "map50")}
    ok = all(d <= 0.02 for d in diffs.values()) and elapsed < 300
    detail = " ".join(f"{k} {getattr(clean, k):.4f}->{getattr(rotated, k):.4f}" for k in diffs) + f"; {elapsed:.0f}s"
    assert acceptance(3, ok, detail)


# -- 4 ---------------------------------------------------------------------------------------


def test_criterion_4_overfit(acceptance, tmp_path):
    t0 = time.perf_counter()
    results = {}
    for stn in (False, True):
        cfg = TrainConfig(synth_train=8, batch_size=8, max_epochs=500, early_stop_patience=500, max_steps=500,
                          eval_interval=500, stn_enabled=stn)
        out = tmp_path / ("stn" if stn else "baseline")
        _, rec = train(cfg, out)
        model, _ = load_model(out / "last.ckpt")
        rep = evaluate_model(model, load_split(cfg, "train"), conf_thresh=cfg.conf_thresh, iou_thresh=cfg.nms_iou)
        results["stn" if stn else "baseline"] = (len(rec.losses), rec.losses[-1], rep.map50)
    elapsed = time.perf_counter() - t0
    ok = all(steps <= 500 and loss < 0.05 and m == 1.0 for steps, loss, m in results.values()) and elapsed < 600
    detail = "; ".join(f"{k}: {s} steps, final loss {l:.4f}, mAP@0.5 {m:.4f}" for k, (s, l, m) in results.items())
    assert acceptance(4, ok, detail + f"; {elapsed:.0f}s")


# -- 5 ---------------------------------------------------------------------------------------


def test_criterion_5_metrics_oracle(acceptance):
    rng = np.random.default_rng(505)
    worst, mismatches = 0.0, 0
    for _ in range(200):
        dets, gts = random_scene(rng)
        for d, g in zip(dets, gts):
            flags, scores = ref_match(d, g, 0.5)
            m = match_detections(d, g, 0.5)
            mismatches += m.tp != flags or m.scores != scores
            n_tp = sum(flags)
            ref_p = n_tp / len(flags) if flags else 1.0
            ref_r = n_tp / len(g) if g else 1.0
            p, r = precision_recall(m)
            worst = max(worst, abs(p - ref_p), abs(r - ref_r))
        for cls in (0, 1):
            worst = max(worst, abs(average_precision(dets, gts, 0.5, cls) - ref_ap(dets, gts, 0.5, cls)))
    ok = mismatches == 0 and worst <= 1e-9
    assert acceptance(5, ok, f"200 scenes: {mismatches} match mismatches, worst P/R/AP diff {worst:.1e}")


# -- 6 ---------------------------------------------------------------------------------------


def test_criterion_6_ciou_dfl(acceptance):
    rng = np.random.default_rng(606)
    in_range = one_iff_identical = concentric = True
    for _ in range(2000):
        w, h = rng.uniform(0.02, 0.5, 2)
        a = BBox(0, *rng.uniform(0.25, 0.75, 2), w, h)
        b = BBox(0, *rng.uniform(0.25, 0.75, 2), *rng.uniform(0.02, 0.5, 2))
        c = ciou(a, b)
        in_range &= -1 < c <= 1
        one_iff_identical &= ciou(a, a) == 1.0 and (c < 1.0 or a == b)
        k = rng.uniform(0.2, 0.95)
        inner = BBox(0, a.cx, a.cy, w * k, w * k * (h / w))
        concentric &= ciou(inner, a) == iou_xyxy(inner.xyxy, a.xyxy)
    dfl_worst = 0.0
    for _ in range(500):
        bins = int(rng.integers(2, 20))
        t = rng.uniform(0, bins - 1)
        logit = rng.normal()
        val = float(dfl_loss(Tensor(np.full(bins, logit)), t).data)
        dfl_worst = max(dfl_worst, abs(val - math.log(bins)))
    ok = in_range and one_iff_identical and concentric and dfl_worst <= 1e-12
    detail = (f"CIOU in (-1,1]: {in_range}; =1 iff identical: {one_iff_identical}; concentric == IoU: {concentric}; "
              f"uniform DFL - ln k worst {dfl_worst:.1e}")
    assert acceptance(6, ok, detail)


# -- 7 ---------------------------------------------------------------------------------------


def test_criterion_7_grid(acceptance, tmp_path):
    cfg = TrainConfig(image_size=32, synth_train=4, synth_test=4, batch_size=2, max_epochs=2, early_stop_patience=2,
                      stn_pool_size=8)
    rep = compare(cfg, tmp_path, n_runs=3, seed=3)
    combos = {tuple(r["spec"][k] is not None for k in ("rotation_deg", "shear_h_deg", "crop_zoom")) for r in rep.rows}
    labels = [r["label"] for r in rep.rows]
    expected = [g.label for g in augment_grid()]
    lines = rep.to_text().splitlines()[3:]
    columns_ok = len(lines) == 8 and all(line.count("±") == 6 for line in lines)
    bit_exact = True
    test = load_split(cfg, "test")
    for name in ("baseline", "stn"):
        for r in range(3):
            model, run_cfg = load_model(tmp_path / f"{name}_run{r}" / "best.ckpt")
            plain = evaluate_model(model, test, None, cfg.conf_thresh, cfg.nms_iou)
            row = rep.rows[labels.index("none")]["runs"][name]
            bit_exact &= all(row[k][r] == getattr(plain, k) for k in ("precision", "recall", "map50"))
    ok = len(combos) == 8 and labels == expected and columns_ok and bit_exact
    detail = f"rows {labels}; mean ± std columns: {columns_ok}; all-off row bit-exact: {bit_exact}"
    assert acceptance(7, ok, detail)


# -- 8 ---------------------------------------------------------------------------------------


def test_criterion_8_band_fusion(acceptance):
    s = SpectralImage({"red": np.array([[0, 100], [200, 300]]), "rededge": np.zeros((2, 2)),
                       "green": np.array([[300, 0], [0, 0]])}, bit_depth=16)
    out = fuse_bands(s).data[0]
    worked = (np.array_equal(out[0], np.array([[0.0, 100 / 300], [200 / 300, 1.0]]))
              and np.array_equal(out[1], np.zeros((2, 2))) and np.array_equal(out[2], [[1.0, 0.0], [0.0, 0.0]]))
    with np.errstate(all="raise"):
        const = fuse_bands(SpectralImage({b: np.full((3, 3), 42) for b in ("red", "rededge", "green")})).data
    guard = np.array_equal(const, np.zeros((1, 3, 3, 3)))
    assert acceptance(8, worked and guard, f"worked 2x2 example exact: {worked}; constant guard zeros: {guard}")


# -- 9 ---------------------------------------------------------------------------------------


def test_criterion_9_eigencam(acceptance):
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(100):
        c, hw = int(rng.integers(1, 9)), int(rng.integers(2, 65))
        m = rng.standard_normal((c, hw))
        vals, vecs = np.linalg.eigh(m.T @ m)
        ref = vecs[:, np.argmax(vals)]
        ref = ref if ref[np.argmax(np.abs(ref))] > 0 else -ref
        worst = max(worst, float(np.abs(ex.principal_projection(m) - ref).max()))
    exact = True
    for _ in range(20):
        f = rng.standard_normal((6, 7))
        g = f if f.flat[np.argmax(np.abs(f))] > 0 else -f
        exact &= np.array_equal(ex.eigencam(f[None, None]).values, (g - g.min()) / (g.max() - g.min()))
    ok = worst <= 1e-6 and exact
    assert acceptance(9, ok, f"100 stacks worst diff vs dense solver {worst:.1e}; C=1 exact: {exact}")


# -- 10 --------------------------------------------------------------------------------------


def test_criterion_10_determinism(acceptance, tmp_path):
    cfg = TrainConfig(image_size=64, synth_train=4, batch_size=2, max_epochs=3, early_stop_patience=3, seed=11,
                      stn_enabled=True, stn_pool_size=8)
    _, a = train(cfg, tmp_path / "a")
    _, b = train(cfg, tmp_path / "b")
    same_losses = a.losses == b.losses and len(a.losses) == 6
    arrays, meta = load_checkpoint(tmp_path / "a" / "last.ckpt")
    save_checkpoint(tmp_path / "copy.ckpt", arrays, meta)
    arrays2, meta2 = load_checkpoint(tmp_path / "copy.ckpt")
    ckpt_exact = meta2 == meta and arrays.keys() == arrays2.keys() and all(
        arrays[k].dtype == arrays2[k].dtype and arrays[k].shape == arrays2[k].shape
        and arrays[k].tobytes() == arrays2[k].tobytes() for k in arrays)
    cfg_exact = TrainConfig.from_json(cfg.to_json()) == cfg
    corpus = label_corpus(50)
    labels_ok = all(serialize_labels(load_labels(t, 3)) == canonical_labels(t) for t in corpus)
    ok = same_losses and ckpt_exact and cfg_exact and labels_ok
    detail = (f"identical losses: {same_losses}; checkpoint round trip exact: {ckpt_exact}; "
              f"config round trip exact: {cfg_exact}; 50-file label corpus canonical: {labels_ok}")
    assert acceptance(10, ok, detail)
