"""Test-time affine augmentation: rotation, shear and center zoom-crop for images and boxes.

Affines here act on continuous pixel coordinates (image edges at 0 and W),
mapping input positions to output positions. The composed transform is
``zoom * shear * rotation`` about the image center, so rotation applies first.
Positive rotation is counterclockwise as displayed (y axis pointing down).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .boxes import BBox
from .data_io import Dataset, Sample
from .stn import pixel_to_theta, warp
from .tensor import Tensor, no_grad

ROTATION_LIMIT = 10.0
SHEAR_LIMIT = 10.0
ZOOM_LIMIT = 0.15


def build_affine(h: int, w: int, rot_deg: float = 0.0, shear_h_deg: float = 0.0, shear_v_deg: float = 0.0,
                 zoom: float = 1.0) -> np.ndarray:
    """2x3 pixel-space affine (input -> output) about the image center."""
    vals = (rot_deg, shear_h_deg, shear_v_deg, zoom)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite augmentation parameters {vals}")
    if zoom <= 0:
        raise ValueError("zoom factor must be positive")
    a = math.radians(rot_deg)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(math.radians(shear_h_deg))], [math.tan(math.radians(shear_v_deg)), 1.0]])
    lin = zoom * (shear @ rot)
    center = np.array([w / 2.0, h / 2.0])
    return np.hstack([lin, (center - lin @ center)[:, None]])


def invert_affine(m: np.ndarray) -> np.ndarray:
    lin = m[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("singular affine transform")
    inv = np.linalg.inv(lin)
    return np.hstack([inv, (-inv @ m[:, 2])[:, None]])


def _is_identity(m: np.ndarray) -> bool:
    return bool(np.array_equal(m, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])))


def warp_with_affine(image, affine: np.ndarray) -> np.ndarray:
    """Resample ``image`` (C x H x W or N x C x H x W) so content moves by ``affine``; zero fill outside."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    batched = arr.ndim == 4
    x = arr if batched else arr[None]
    if _is_identity(affine):
        return arr.copy()
    h, w = x.shape[2:]
    theta = pixel_to_theta(invert_affine(affine), h, w)
    with no_grad():
        out = warp(Tensor(x), np.tile(theta, (x.shape[0], 1))).data
    return out if batched else out[0]


def affine_image(image, rot_deg: float = 0.0, shear_h_deg: float = 0.0, shear_v_deg: float = 0.0,
                 zoom: float = 1.0) -> np.ndarray:
    """Rotate, shear and zoom an image about its center (bilinear, zero fill, same size)."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    h, w = arr.shape[-2:]
    return warp_with_affine(arr, build_affine(h, w, rot_deg, shear_h_deg, shear_v_deg, zoom))


def transform_boxes(boxes: list[BBox], affine: np.ndarray, image_dims: tuple[int, int],
                    min_visible: float = 0.1) -> list[BBox]:
    """Map boxes through a pixel-space affine; keep the clipped axis-aligned hull of the corners.

    A box is dropped when its clipped hull keeps less than ``min_visible`` of
    the unclipped hull's area.
    """
    affine = np.asarray(affine, dtype=np.float64)
    if abs(np.linalg.det(affine[:, :2])) < 1e-12:
        raise ValueError("singular affine transform")
    h, w = image_dims
    scale = np.array([w, h], dtype=np.float64)
    out = []
    for b in boxes:
        x1, y1, x2, y2 = b.xyxy
        corners = np.array([[x1, y1], [x2, y1], [x1, y2], [x2, y2]]) * scale
        mapped = (corners @ affine[:, :2].T + affine[:, 2]) / scale
        lo, hi = mapped.min(axis=0), mapped.max(axis=0)
        full = float(np.prod(hi - lo))
        clo, chi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
        kept = float(np.prod(np.maximum(chi - clo, 0.0)))
        if full <= 0 or kept < min_visible * full or kept == 0.0:
            continue
        out.append(BBox.from_xyxy(b.class_id, clo[0], clo[1], chi[0], chi[1]))
    return out


@dataclass(frozen=True)
class AugmentSpec:
    """Per-image random affine augmentation; ``None`` switches a component off.

    Angle ranges are (low, high) in degrees; ``crop_zoom`` z draws a zoom
    factor uniformly from [1, 1 + z].
    """

    rotation_deg: tuple[float, float] | None = None
    shear_h_deg: tuple[float, float] | None = None
    shear_v_deg: tuple[float, float] | None = None
    crop_zoom: float | None = None
    seed: int = 0
    min_visible: float = 0.1

    def __post_init__(self):
        for name in ("rotation_deg", "shear_h_deg", "shear_v_deg"):
            rng = getattr(self, name)
            if rng is None:
                continue
            lo, hi = rng
            limit = 180.0 if name == "rotation_deg" else 45.0
            if not (-limit <= lo <= hi <= limit):
                raise ValueError(f"{name} range {rng} outside [-{limit}, {limit}] or inverted")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.crop_zoom is not None and not 0.0 <= self.crop_zoom <= 1.0:
            raise ValueError("crop_zoom must lie in [0, 1]")

    @classmethod
    def from_names(cls, names, seed: int = 0) -> "AugmentSpec":
        """Build from component names: 'rotation', 'shear', 'crop' (default magnitudes)."""
        names = {n.strip() for n in (names.split(",") if isinstance(names, str) else names) if n.strip()}
        unknown = names - {"rotation", "shear", "crop", "none"}
        if unknown:
            raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")
        sym_rot = (-ROTATION_LIMIT, ROTATION_LIMIT)
        sym_sh = (-SHEAR_LIMIT, SHEAR_LIMIT)
        return cls(
            rotation_deg=sym_rot if "rotation" in names else None,
            shear_h_deg=sym_sh if "shear" in names else None,
            shear_v_deg=sym_sh if "shear" in names else None,
            crop_zoom=ZOOM_LIMIT if "crop" in names else None,
            seed=seed,
        )

    @property
    def components(self) -> tuple[bool, bool, bool]:
        """(rotation, shear, crop) on/off flags."""
        return (self.rotation_deg is not None,
                self.shear_h_deg is not None or self.shear_v_deg is not None,
                self.crop_zoom is not None)

    @property
    def is_identity(self) -> bool:
        return not any(self.components)

    @property
    def label(self) -> str:
        on = [n for n, flag in zip(("rotation", "shear", "crop"), self.components) if flag]
        return "+".join(on) if on else "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rotation_deg", "shear_h_deg", "shear_v_deg"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        d = dict(d)
        for k in ("rotation_deg", "shear_h_deg", "shear_v_deg"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def draw(self, index: int) -> dict[str, float]:
        """Parameters for image ``index``, keyed by (seed, index) so order and parallelism do not matter."""
        u = np.random.default_rng([self.seed, index]).random(4)

        def pick(rng, x):
            return 0.0 if rng is None else rng[0] + x * (rng[1] - rng[0])

        return {
            "rot_deg": pick(self.rotation_deg, u[0]),
            "shear_h_deg": pick(self.shear_h_deg, u[1]),
            "shear_v_deg": pick(self.shear_v_deg, u[2]),
            "zoom": 1.0 + (0.0 if self.crop_zoom is None else u[3] * self.crop_zoom),
        }


def augment_sample(sample: Sample, params: dict[str, float], min_visible: float = 0.1) -> Sample:
    h, w = sample.image.shape[1:]
    m = build_affine(h, w, **params)
    return Sample(sample.name, warp_with_affine(sample.image, m),
                  transform_boxes(sample.boxes, m, (h, w), min_visible))


def augment_testset(dataset: Dataset, spec: AugmentSpec) -> Dataset:
    """Apply per-image draws of ``spec`` to every image and its boxes."""
    if spec.is_identity:
        return Dataset([Sample(s.name, s.image.copy(), list(s.boxes)) for s in dataset.samples], dataset.classes)
    samples = [augment_sample(s, spec.draw(i), spec.min_visible) for i, s in enumerate(dataset.samples)]
    return Dataset(samples, dataset.classes)


def augment_grid(base: AugmentSpec | None = None) -> list[AugmentSpec]:
    """All eight on/off combinations of (rotation, shear, crop), rotation varying slowest."""
    base = base if base is not None else AugmentSpec.from_names("rotation,shear,crop")
    full = AugmentSpec.from_names("rotation,shear,crop", seed=base.seed)
    rot = base.rotation_deg or full.rotation_deg
    sh_h = base.shear_h_deg or full.shear_h_deg
    sh_v = base.shear_v_deg or full.shear_v_deg
    zoom = base.crop_zoom if base.crop_zoom is not None else full.crop_zoom
    grid = []
    for r, s, c in itertools.product((False, True), repeat=3):
        grid.append(replace(base, rotation_deg=rot if r else None, shear_h_deg=sh_h if s else None,
                            shear_v_deg=sh_v if s else None, crop_zoom=zoom if c else None))
    return grid
