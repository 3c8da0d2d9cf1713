"""Run configuration with JSON round-trip."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .augment import AugmentSpec
from .detector import DetectorConfig, LossWeights

DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 0.002
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 50
    max_steps: int | None = None  # optional cap on optimizer steps
    eval_interval: int = 1  # validate every k epochs (and always on the last)
    weight_decay: float = 5e-4
    stn_lr_scale: float = 1e-3  # learning-rate multiplier for localization-net parameters
    seed: int = 0
    dtype: str = "float32"
    # model
    stn_enabled: bool = False
    stn_pool_size: int = 28
    n_classes: int = 1
    reg_max: int = 8
    loss_cls: float = 0.5
    loss_box: float = 7.5
    loss_dfl: float = 1.5
    # data: a dataset root with images/<split> and labels/<split>, or synthetic scenes when unset
    image_size: int = 128
    data_root: str | None = None
    train_split: str = "train"
    val_split: str = "valid"
    test_split: str = "test"
    synth_seed: int = 0
    synth_train: int = 8
    synth_val: int = 0  # 0: validate on the training images
    synth_test: int = 8
    # comma-separated subset of rotation,shear,crop applied to training batches (off by default)
    train_augment: str | None = None
    # evaluation
    conf_thresh: float = 0.25
    nms_iou: float = 0.7

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("batch_size", "max_epochs", "early_stop_patience", "eval_interval",
                    "stn_pool_size", "n_classes", "reg_max", "image_size")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        for name in ("lr", "weight_decay", "stn_lr_scale", "loss_cls", "loss_box", "loss_dfl"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be non-negative, got {v!r}")
        if self.early_stop_patience > self.max_epochs:
            raise ConfigError("early_stop_patience exceeds max_epochs")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive when set")
        if self.image_size % 32:
            raise ConfigError("image_size must be a multiple of 32")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")
        if not (0 <= self.conf_thresh <= 1 and 0 <= self.nms_iou <= 1):
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.train_augment:
            try:
                AugmentSpec.from_names(self.train_augment)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        if self.data_root is None and self.synth_train <= 0:
            raise ConfigError("synthetic training set is empty")

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(n_classes=self.n_classes, reg_max=self.reg_max, stn_enabled=self.stn_enabled,
                              stn_pool_size=self.stn_pool_size)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_cls, self.loss_box, self.loss_dfl)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")
