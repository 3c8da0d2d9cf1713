"""Training, evaluation and the augmentation-grid comparison."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from importlib import resources
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentSpec, augment_grid, augment_sample, augment_testset, invert_affine, transform_boxes
from .boxes import BBox, Detection
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data_io import Dataset, DatasetError, Sample, load_dataset, read_dataset, synth_dataset
from .detector import Detector, assign_targets, detection_loss, predict
from .metrics import MetricsReport, evaluate as evaluate_detections
from .optim import OptimState, adamw_step, default_no_decay
from .stn import localize, theta_to_pixel, warp
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

OUTPUT_ENV = "STNDET_OUTPUT_ROOT"
MODEL_NAMES = ("baseline", "stn")


class TrainingError(RuntimeError):
    pass


def output_root(default: str | os.PathLike = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


# -- data ---------------------------------------------------------------------------


def load_split(cfg: TrainConfig, which: str) -> Dataset:
    """Dataset for ``which`` in {'train', 'val', 'test'} from the configured root or synthetic scenes."""
    if which not in ("train", "val", "test"):
        raise ValueError(f"unknown split role {which!r}")
    if cfg.data_root is not None:
        split = {"train": cfg.train_split, "val": cfg.val_split, "test": cfg.test_split}[which]
        ds = read_dataset(load_dataset(cfg.data_root, split, cfg.n_classes))
    elif which == "train" or (which == "val" and cfg.synth_val == 0):
        ds = synth_dataset(cfg.synth_seed, cfg.synth_train, cfg.image_size, cfg.n_classes)
    elif which == "val":
        ds = synth_dataset(cfg.synth_seed + 1, cfg.synth_val, cfg.image_size, cfg.n_classes)
    else:
        ds = synth_dataset(cfg.synth_seed + 2, cfg.synth_test, cfg.image_size, cfg.n_classes)
    if len(ds) == 0:
        raise DatasetError(f"{which} dataset is empty")
    return ds


# -- model / optimiser ----------------------------------------------------------------


def build_model(cfg: TrainConfig) -> Detector:
    return Detector(cfg.detector_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))


def build_optimizer(model: Detector, cfg: TrainConfig) -> OptimState:
    names = list(model.trainable_parameters())
    return OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=default_no_decay(names),
                      lr_scale={n: cfg.stn_lr_scale for n in names if n.startswith("stn.")})


def frame_boxes(boxes: list[list[BBox]], theta, image_size: tuple[int, int]) -> list[list[BBox]]:
    """Move ground truth into the transformer's output frame (identity without a transformer)."""
    if theta is None:
        return boxes
    h, w = image_size
    return [transform_boxes(b, invert_affine(theta_to_pixel(t, h, w)), (h, w)) for b, t in zip(boxes, theta)]


def train_step(model: Detector, state: OptimState, images: np.ndarray, boxes: list[list[BBox]],
               cfg: TrainConfig) -> tuple[float, dict[str, float]]:
    """Forward, loss, backward and one AdamW update. Returns (loss, parts)."""
    params = model.trainable_parameters()
    model.zero_grad()
    x = Tensor(images.astype(model.dtype))
    head, theta = model(x)
    size = images.shape[2:]
    targets = assign_targets(frame_boxes(boxes, theta, size), size, cfg.n_classes, cfg.reg_max)
    loss, parts = detection_loss(head, targets, cfg.loss_weights(), return_parts=True)
    value = float(loss.data)
    if not np.isfinite(value):
        return value, parts
    loss.backward()
    adamw_step(params, state)
    return value, parts


# -- records ------------------------------------------------------------------------


def content_hash(cfg: TrainConfig) -> str:
    """Git-style blob hash over the package sources and the config."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{blob} {path.name}\n".encode())
    cfg_bytes = cfg.to_json().encode()
    h.update(hashlib.sha1(b"blob %d\0" % len(cfg_bytes) + cfg_bytes).hexdigest().encode())
    return h.hexdigest()


@dataclass
class RunRecord:
    config: dict
    content_hash: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_map50: float | None = None
    stop_reason: str = ""
    wall_clock: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [loss for e in self.epochs for loss in e["step_losses"]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> "RunRecord":
        """Rebuild from a JSON-lines record; a later header (resume) keeps the epochs written so far."""
        rec = None
        for line in Path(path).read_text().splitlines():
            entry = json.loads(line)
            kind = entry.pop("type")
            if kind == "header" and rec is None:
                rec = cls(entry["config"], entry["content_hash"])
            elif kind == "epoch":
                rec.epochs = [e for e in rec.epochs if e["epoch"] < entry["epoch"]] + [entry]
            elif kind == "summary":
                rec.best_epoch, rec.best_map50 = entry["best_epoch"], entry["best_map50"]
                rec.stop_reason, rec.wall_clock = entry["stop_reason"], entry["wall_clock"]
        if rec is None:
            raise ValueError(f"{path} has no header line")
        return rec


def _append(path: Path, entry: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


# -- training -----------------------------------------------------------------------


def _save(path: Path, model: Detector, state: OptimState, cfg: TrainConfig, record: RunRecord,
          epoch: int) -> Path:
    arrays = dict(model.state_dict())
    arrays.update(state.arrays())
    meta = {"config": cfg.to_dict(), "epoch": epoch, "optim": state.hyper(),
            "best_epoch": record.best_epoch, "best_map50": record.best_map50, "epochs": record.epochs}
    return save_checkpoint(path, arrays, meta)


def _dump_diagnostic(out_dir: Path, model: Detector, epoch: int, step: int, parts: dict) -> Path:
    norms = {k: float(np.linalg.norm(p.data)) for k, p in model.named_parameters().items()}
    finite = {k: bool(np.all(np.isfinite(p.data))) for k, p in model.named_parameters().items()}
    path = out_dir / "diagnostic.json"
    path.write_text(json.dumps({"epoch": epoch, "step": step, "loss_parts": parts,
                                "param_norms": norms, "param_finite": finite}, indent=2, sort_keys=True))
    return path


def _augment_batch(spec: AugmentSpec, epoch: int, idx, images: np.ndarray, boxes: list[list[BBox]]):
    """Fresh draws per (epoch, sample index) so resumed runs see the same augmentations."""
    out_x, out_b = [], []
    for i, x, b in zip(idx, images, boxes):
        s = augment_sample(Sample("", x, b), spec.draw(int(epoch) * 1_000_003 + int(i)), spec.min_visible)
        out_x.append(s.image)
        out_b.append(s.boxes)
    return np.stack(out_x), out_b


def train(cfg: TrainConfig, out_dir: str | os.PathLike, resume: bool = False,
          train_set: Dataset | None = None, val_set: Dataset | None = None,
          stop_after: int | None = None) -> tuple[Path, RunRecord]:
    """Train with AdamW and mAP@0.5 early stopping; returns (best checkpoint, record).

    Writes ``best.ckpt``, ``last.ckpt`` and ``record.jsonl`` under ``out_dir``.
    ``resume`` continues from ``last.ckpt``; ``stop_after`` ends the run after
    that epoch as if interrupted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = train_set if train_set is not None else load_split(cfg, "train")
    val_set = val_set if val_set is not None else load_split(cfg, "val")
    if len(train_set) == 0:
        raise DatasetError("training set is empty")
    model = build_model(cfg)
    state = build_optimizer(model, cfg)
    record = RunRecord(cfg.to_dict(), content_hash(cfg))
    rec_path = out / "record.jsonl"
    start = 1
    if resume:
        arrays, meta = load_checkpoint(out / "last.ckpt")
        if TrainConfig.from_dict(meta["config"]) != cfg:
            raise TrainingError("checkpoint config differs from the requested config")
        model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
        state = OptimState.restore(meta["optim"], {k: v for k, v in arrays.items() if k.startswith("optim.")})
        record.epochs = meta["epochs"]
        record.best_epoch, record.best_map50 = meta["best_epoch"], meta["best_map50"]
        start = meta["epoch"] + 1
    else:
        rec_path.unlink(missing_ok=True)
    _append(rec_path, {"type": "header", "config": record.config, "content_hash": record.content_hash,
                       "start_epoch": start})
    images, boxes = train_set.images(), train_set.boxes()
    n = len(train_set)
    train_spec = AugmentSpec.from_names(cfg.train_augment, seed=cfg.seed) if cfg.train_augment else None
    t0 = time.perf_counter()
    reason = "max_epochs"
    for epoch in range(start, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        step_losses = []
        capped = False
        for lo in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                capped = True
                break
            idx = order[lo:lo + cfg.batch_size]
            batch_x, batch_b = images[idx], [boxes[i] for i in idx]
            if train_spec is not None:
                batch_x, batch_b = _augment_batch(train_spec, epoch, idx, batch_x, batch_b)
            loss, parts = train_step(model, state, batch_x, batch_b, cfg)
            if not np.isfinite(loss):
                diag = _dump_diagnostic(out, model, epoch, state.step, parts)
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {state.step}; see {diag}")
            step_losses.append(loss)
        capped = capped or (cfg.max_steps is not None and state.step >= cfg.max_steps)
        last = capped or epoch == cfg.max_epochs
        entry = {"epoch": epoch, "train_loss": float(np.mean(step_losses)) if step_losses else None,
                 "step_losses": step_losses, "steps": state.step, "val": None}
        improved = False
        if epoch % cfg.eval_interval == 0 or last:
            report = evaluate_model(model, val_set, conf_thresh=cfg.conf_thresh, iou_thresh=cfg.nms_iou)
            entry["val"] = report.to_dict()
            improved = record.best_map50 is None or report.map50 > record.best_map50
            if improved:
                record.best_epoch, record.best_map50 = epoch, report.map50
        record.epochs.append(entry)
        if improved:
            _save(out / "best.ckpt", model, state, cfg, record, epoch)
        _append(rec_path, {"type": "epoch", **entry})
        _save(out / "last.ckpt", model, state, cfg, record, epoch)
        logger.info("epoch %d loss %s val mAP@0.5 %s", epoch, entry["train_loss"],
                    None if entry["val"] is None else entry["val"]["map50"])
        if capped:
            reason = "max_steps"
            break
        if record.best_epoch is not None and epoch - record.best_epoch >= cfg.early_stop_patience:
            reason = "early_stop"
            break
        if stop_after is not None and epoch >= stop_after:
            reason = "interrupted"
            break
    record.stop_reason = reason
    record.wall_clock += time.perf_counter() - t0
    _append(rec_path, {"type": "summary", "best_epoch": record.best_epoch, "best_map50": record.best_map50,
                       "stop_reason": reason, "wall_clock": record.wall_clock})
    return out / "best.ckpt", record


# -- evaluation ---------------------------------------------------------------------


def load_model(path: str | os.PathLike) -> tuple[Detector, TrainConfig]:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return model, cfg


def run_inference(model: Detector, dataset: Dataset, iou_thresh: float = 0.7,
                  batch_size: int = 16) -> list[list[Detection]]:
    """Low-threshold detections (score > 0.001) for every image, in input-image coordinates."""
    dets = []
    images = dataset.images()
    for lo in range(0, len(dataset), batch_size):
        x = Tensor(images[lo:lo + batch_size].astype(model.dtype))
        dets.extend(predict(model, x, conf_thresh=0.001, iou_thresh=iou_thresh))
    return dets


def evaluate_model(model: Detector, dataset: Dataset, augment: AugmentSpec | None = None,
                   conf_thresh: float = 0.25, iou_thresh: float = 0.7) -> MetricsReport:
    if augment is not None:
        dataset = augment_testset(dataset, augment)
    dets = run_inference(model, dataset, iou_thresh)
    report = evaluate_detections(dets, dataset.boxes(), conf_thresh, model.cfg.n_classes)
    if augment is not None:
        report.augment = augment.to_dict()
    return report


def evaluate(checkpoint: str | os.PathLike, dataset: Dataset, augment: AugmentSpec | None = None,
             conf_thresh: float = 0.25, iou_thresh: float = 0.7) -> MetricsReport:
    """Load a checkpoint and evaluate it, optionally on an augmented copy of ``dataset``."""
    model, cfg = load_model(checkpoint)
    if dataset.classes and len(dataset.classes) != cfg.n_classes:
        raise ValueError(f"dataset has {len(dataset.classes)} classes, checkpoint expects {cfg.n_classes}")
    return evaluate_model(model, dataset, augment, conf_thresh, iou_thresh)


# -- comparison -----------------------------------------------------------------------

METRICS = ("precision", "recall", "map50")


@dataclass
class CompareReport:
    """Rows: augmentation settings; per model and metric, one value per run."""

    rows: list[dict]
    models: tuple[str, ...]
    n_runs: int
    seed: int
    seeds_vary: str = "init and data order"

    def summary(self, row: dict, model: str, metric: str) -> tuple[float, float]:
        v = np.asarray(row["runs"][model][metric], dtype=np.float64) * 100.0
        return float(v.mean()), float(v.std())

    def to_dict(self) -> dict:
        out = asdict(self)
        for row, src in zip(out["rows"], self.rows):
            row["summary"] = {m: {k: dict(zip(("mean", "std"), self.summary(src, m, k))) for k in METRICS}
                              for m in self.models}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        label_w = max(len("Augmentation"), *(len(r["label"]) for r in self.rows))
        cell_w = 15
        head1 = " " * label_w + "".join(f" | {m:^{3 * cell_w + 2}}" for m in self.models)
        names = {"precision": "P (%)", "recall": "R (%)", "map50": "mAP@0.5 (%)"}
        head2 = f"{'Augmentation':<{label_w}}" + "".join(
            " | " + " ".join(f"{names[k]:>{cell_w}}" for k in METRICS) for _ in self.models)
        lines = [head1, head2, "-" * len(head2)]
        for row in self.rows:
            cells = []
            for m in self.models:
                vals = [self.summary(row, m, k) for k in METRICS]
                cells.append(" | " + " ".join(f"{f'{mu:.2f} ± {sd:.2f}':>{cell_w}}" for mu, sd in vals))
            lines.append(f"{row['label']:<{label_w}}" + "".join(cells))
        return "\n".join(lines) + "\n"


def compare(cfg: TrainConfig, out_dir: str | os.PathLike, n_runs: int = 3, seed: int = 0,
            grid: list[AugmentSpec] | None = None,
            checkpoints: dict[str, list[str | os.PathLike]] | None = None) -> CompareReport:
    """Evaluate baseline and STN models over the augmentation grid, ``n_runs`` seeds each.

    Run ``r`` trains with seed ``seed + r`` (initialisation and batch order both
    change). Test-set augmentation draws use ``seed`` for every run and model.
    Pre-trained ``checkpoints`` (model name -> one path per run) skip training.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    grid = grid if grid is not None else augment_grid(AugmentSpec.from_names("rotation,shear,crop", seed=seed))
    test = load_split(cfg, "test")
    out = Path(out_dir)
    paths: dict[str, list[Path]] = {}
    for name in MODEL_NAMES:
        if checkpoints is not None and name in checkpoints:
            if len(checkpoints[name]) != n_runs:
                raise ValueError(f"{name}: expected {n_runs} checkpoints, got {len(checkpoints[name])}")
            paths[name] = [Path(p) for p in checkpoints[name]]
            continue
        paths[name] = []
        for r in range(n_runs):
            run_cfg = replace(cfg, seed=seed + r, stn_enabled=(name == "stn"))
            ckpt, _ = train(run_cfg, out / f"{name}_run{r}")
            paths[name].append(ckpt)
    rows = [{"label": spec.label, "spec": spec.to_dict(), "runs": {m: {k: [] for k in METRICS} for m in MODEL_NAMES}}
            for spec in grid]
    for name in MODEL_NAMES:
        for ckpt in paths[name]:
            model, run_cfg = load_model(ckpt)
            for row, spec in zip(rows, grid):
                rep = evaluate_model(model, test, None if spec.is_identity else spec,
                                     cfg.conf_thresh, cfg.nms_iou)
                for k in METRICS:
                    row["runs"][name][k].append(getattr(rep, k))
    return CompareReport(rows, MODEL_NAMES, n_runs, seed)


# -- explanation ------------------------------------------------------------------------

LAYERS = {"stride8": 0, "stride16": 1, "stride32": 2}


def layer_activations(model: Detector, image: np.ndarray, layer: str = "stride8") -> np.ndarray:
    """Backbone activations (1 x C x H x W) feeding the head at ``layer``, after the transformer."""
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}; choose from {sorted(LAYERS)}")
    x = Tensor(np.asarray(image, dtype=model.dtype)[None] if np.ndim(image) == 3 else image.astype(model.dtype))
    with no_grad():
        if model.stn is not None:
            x = warp(x, localize(model.stn, x))
        return model.backbone(x)[LAYERS[layer]].data


def load_schema(name: str) -> dict:
    """Published JSON schema: 'report' (evaluation) or 'compare' (grid table)."""
    text = resources.files(__package__).joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)
