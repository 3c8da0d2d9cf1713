"""Overfit the detector on a handful of synthetic images and report loss and mAP on them.

    python3 scripts/overfit_demo.py --steps 500 --stn
"""

import argparse
import logging
import tempfile
from pathlib import Path

from stndet.config import TrainConfig
from stndet.harness import evaluate_model, load_model, load_split, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--stn", action="store_true", help="put the spatial transformer in front of the detector")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="run directory (default: a temporary directory)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    batch = min(8, args.images)
    epochs = -(-args.steps * batch // args.images)
    cfg = TrainConfig(synth_train=args.images, image_size=args.size, batch_size=batch, max_epochs=epochs,
                      early_stop_patience=epochs, max_steps=args.steps, eval_interval=epochs,
                      stn_enabled=args.stn, seed=args.seed)
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="overfit_"))
    _, record = train(cfg, out)
    model, _ = load_model(out / "last.ckpt")
    report = evaluate_model(model, load_split(cfg, "train"), conf_thresh=cfg.conf_thresh, iou_thresh=cfg.nms_iou)
    print(f"steps {len(record.losses)}  final loss {record.losses[-1]:.4f}  wall clock {record.wall_clock:.0f}s")
    print(report.to_text(), end="")
    print(f"run directory: {out}")


if __name__ == "__main__":
    main()
