"""Command-line entry point: train, eval, compare, fuse-bands, explain.

Failures print a one-line JSON object ``{"error": ..., "message": ...}`` on
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import explain as ex
from .augment import AugmentSpec
from .config import TrainConfig
from .data_io import SpectralImage, fuse_bands, fuse_to_cache, load_dataset, read_dataset, read_image, write_image
from .harness import LAYERS, compare, evaluate, layer_activations, load_model, load_split, output_root, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stndet", description="Detector with an optional spatial transformer front end.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector from a JSON config")
    t.add_argument("--config", required=True, help="TrainConfig JSON file")
    t.add_argument("--out", help="run directory (default: <output root>/train)")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally on an augmented test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root", help="dataset root (default: the checkpoint config's test data)")
    e.add_argument("--split", default="test")
    e.add_argument("--augment", help="comma-separated subset of rotation,shear,crop")
    e.add_argument("--augment-seed", type=int, default=0)
    e.add_argument("--conf", type=float, default=0.25, help="score threshold for precision/recall")
    e.add_argument("--iou", type=float, default=0.7, help="NMS IoU threshold")
    e.add_argument("--out", help="report JSON path (default: <output root>/eval/report.json)")

    c = sub.add_parser("compare", help="baseline vs STN over the 8-way augmentation grid")
    c.add_argument("--config", required=True)
    c.add_argument("--runs", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="output directory (default: <output root>/compare)")
    c.add_argument("--baseline-ckpt", nargs="+", help="pre-trained baseline checkpoints, one per run")
    c.add_argument("--stn-ckpt", nargs="+", help="pre-trained STN checkpoints, one per run")

    f = sub.add_parser("fuse-bands", help="fuse Red/RedEdge/Green bands into a pseudo-RGB PNG")
    f.add_argument("--green", required=True)
    f.add_argument("--red", required=True)
    f.add_argument("--rededge", required=True)
    f.add_argument("--nir", help="stored but not used by the fusion")
    dest = f.add_mutually_exclusive_group(required=True)
    dest.add_argument("--out", help="output image path")
    dest.add_argument("--cache-dir", help="write <content hash>.png here, reusing an existing file")

    x = sub.add_parser("explain", help="EigenCAM heatmap overlay for one image")
    x.add_argument("--image", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--layer", default="stride8", choices=sorted(LAYERS))
    x.add_argument("--alpha", type=float, default=0.5)
    x.add_argument("--out", required=True, help="output PNG")
    return p


def _cmd_train(args) -> dict:
    cfg = TrainConfig.load(args.config)
    out = Path(args.out) if args.out else output_root() / "train"
    ckpt, record = train(cfg, out, resume=args.resume)
    return {"checkpoint": str(ckpt), "last": str(out / "last.ckpt"), "record": str(out / "record.jsonl"),
            "best_epoch": record.best_epoch, "best_map50": record.best_map50, "stop_reason": record.stop_reason}


def _cmd_eval(args) -> dict:
    _, cfg = load_model(args.checkpoint)
    if args.data_root:
        dataset = read_dataset(load_dataset(args.data_root, args.split, cfg.n_classes))
    else:
        dataset = load_split(cfg, "test")
    spec = AugmentSpec.from_names(args.augment, seed=args.augment_seed) if args.augment else None
    report = evaluate(args.checkpoint, dataset, spec, args.conf, args.iou)
    out = Path(args.out) if args.out else output_root() / "eval" / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    sys.stdout.write(report.to_text())
    return {"report": str(out)}


def _cmd_compare(args) -> dict:
    cfg = TrainConfig.load(args.config)
    out = Path(args.out) if args.out else output_root() / "compare"
    ckpts = {}
    if args.baseline_ckpt:
        ckpts["baseline"] = args.baseline_ckpt
    if args.stn_ckpt:
        ckpts["stn"] = args.stn_ckpt
    report = compare(cfg, out, n_runs=args.runs, seed=args.seed, checkpoints=ckpts or None)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(report.to_json() + "\n")
    (out / "compare.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return {"json": str(out / "compare.json"), "table": str(out / "compare.txt")}


def _cmd_fuse(args) -> dict:
    paths = {"green": args.green, "red": args.red, "rededge": args.rededge}
    if args.nir:
        paths["nir"] = args.nir
    s = SpectralImage.from_files(paths)
    if args.cache_dir:
        return {"image": str(fuse_to_cache(s, args.cache_dir))}
    write_image(args.out, fuse_bands(s).data[0])
    return {"image": args.out}


def _cmd_explain(args) -> dict:
    model, _ = load_model(args.checkpoint)
    image = read_image(args.image)
    heat = ex.eigencam(layer_activations(model, image, args.layer), layer=args.layer)
    ex.save_png(args.out, ex.overlay(heat, image, args.alpha))
    return {"image": args.out, "layer": args.layer, "degenerate": heat.degenerate}


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "compare": _cmd_compare, "fuse-bands": _cmd_fuse,
            "explain": _cmd_explain}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - report any failure as a machine-readable error
        return _fail(type(exc).__name__, exc, 1)
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
