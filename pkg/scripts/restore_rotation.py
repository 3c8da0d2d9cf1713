"""Undo a known test-set rotation with a frozen spatial transformer.

Trains a baseline detector, evaluates it on the clean synthetic test set and
on a copy rotated by ``--deg``, first without and then with a transformer
frozen to the inverse rotation in front of it.

    python3 scripts/restore_rotation.py --deg 10
"""

import argparse
import tempfile
from pathlib import Path

from stndet.augment import AugmentSpec, build_affine
from stndet.config import TrainConfig
from stndet.harness import evaluate_model, load_model, load_split, train
from stndet.stn import LocalizationNet, pixel_to_theta


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--deg", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--train-images", type=int, default=32)
    p.add_argument("--test-images", type=int, default=16)
    p.add_argument("--checkpoint", help="skip training and use this baseline checkpoint")
    args = p.parse_args()

    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    else:
        cfg = TrainConfig(synth_train=args.train_images, synth_test=args.test_images, batch_size=8,
                          max_epochs=1000, early_stop_patience=1000, max_steps=args.steps, eval_interval=1000)
        out = Path(tempfile.mkdtemp(prefix="restore_"))
        train(cfg, out)
        ckpt = out / "last.ckpt"
    model, cfg = load_model(ckpt)
    test = load_split(cfg, "test")
    spec = AugmentSpec(rotation_deg=(args.deg, args.deg))
    size = cfg.image_size

    rows = [("clean", evaluate_model(model, test, None, cfg.conf_thresh, cfg.nms_iou)),
            (f"rotated {args.deg:+g} deg", evaluate_model(model, test, spec, cfg.conf_thresh, cfg.nms_iou))]
    model.stn = LocalizationNet(cfg.stn_pool_size).freeze_to(
        pixel_to_theta(build_affine(size, size, rot_deg=args.deg), size, size))
    rows.append((f"rotated {args.deg:+g} deg + inverse STN",
                 evaluate_model(model, test, spec, cfg.conf_thresh, cfg.nms_iou)))
    width = max(len(name) for name, _ in rows)
    print(f"{'':<{width}}  {'P':>7} {'R':>7} {'mAP@0.5':>8}")
    for name, r in rows:
        print(f"{name:<{width}}  {r.precision:7.4f} {r.recall:7.4f} {r.map50:8.4f}")


if __name__ == "__main__":
    main()
