"""Dataset ingestion: YOLO-format labels, multispectral band fusion, synthetic scenes.

Directory layout::

    root/images/{train,valid,test}/<stem>.<png|jpg|ppm|pgm>
    root/labels/{train,valid,test}/<stem>.txt
    root/classes.txt            optional, one class name per line
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BBox, BoxError
from .tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp")
WAVELENGTHS_NM = {"green": 580, "red": 660, "rededge": 730, "nir": 820}
FUSION_ORDER = ("red", "rededge", "green")


class LabelError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DatasetError(ValueError):
    pass


# -- labels --------------------------------------------------------------------


def load_labels(text: str, n_classes: int) -> list[BBox]:
    """Parse YOLO label text (``class cx cy w h`` per line, normalized floats)."""
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelError(f"expected 5 fields, got {len(parts)}", lineno)
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise LabelError(f"malformed field ({exc})", lineno) from None
        if cls < 0 or cls >= n_classes:
            raise LabelError(f"class id {cls} outside vocabulary of {n_classes}", lineno)
        try:
            boxes.append(BBox(cls, cx, cy, w, h))
        except BoxError as exc:
            raise LabelError(f"out of range: {exc}", lineno) from None
    return boxes


def serialize_labels(boxes) -> str:
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes)


def canonical_labels(text: str) -> str:
    """Whitespace-normalized, fixed 6-decimal form of label text."""
    out = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        out.append(" ".join([str(int(parts[0]))] + [f"{float(p):.6f}" for p in parts[1:]]) + "\n")
    return "".join(out)


# -- netpbm --------------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6), 8 or 16 bit. PPM returns H x W x 3."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    pos += 1  # single whitespace before raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValueError("netpbm writer needs uint8 or uint16 data")
    magic = b"P6" if arr.ndim == 3 else b"P5"
    h, w = arr.shape[:2]
    maxval = 65535 if arr.dtype == np.uint16 else 255
    raster = arr.astype(">u2").tobytes() if arr.dtype == np.uint16 else arr.tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + raster)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Image file to a 3 x H x W float array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        arr = read_pnm(path)
        scale = 65535.0 if arr.dtype == np.uint16 else 255.0
        arr = arr.astype(np.float64) / scale
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """3 x H x W float in [0, 1] to H x W x 3 bytes."""
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    path = Path(path)
    rgb = to_uint8(image)
    if path.suffix.lower() == ".ppm":
        write_pnm(path, rgb)
    else:
        Image.fromarray(rgb).save(path, format="PNG")


# -- multispectral ----------------------------------------------------------------


@dataclass
class SpectralImage:
    """Single-channel bands keyed by name (green, red, rededge, nir)."""

    bands: dict[str, np.ndarray]
    bit_depth: int = 8
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.bands) - set(WAVELENGTHS_NM)
        if unknown:
            raise ValueError(f"unknown band names {sorted(unknown)}; expected {sorted(WAVELENGTHS_NM)}")
        shapes = {np.shape(b) for b in self.bands.values()}
        if len(shapes) > 1:
            raise ValueError(f"bands differ in size: {sorted(shapes)}")
        if self.bit_depth not in (8, 16):
            raise ValueError("bit depth must be 8 or 16")

    @property
    def dims(self) -> tuple[int, int]:
        return next(iter(self.bands.values())).shape

    @classmethod
    def from_files(cls, paths: dict[str, str | os.PathLike], metadata: dict | None = None) -> "SpectralImage":
        bands = {name: read_pnm(p) for name, p in paths.items()}
        depth = 16 if any(b.dtype == np.uint16 for b in bands.values()) else 8
        return cls(bands, depth, metadata or {})


def fuse_bands(s: SpectralImage) -> Tensor:
    """Stack Red, RedEdge, Green and min-max normalize the whole stack jointly.

    Returns a 1 x 3 x H x W tensor in [0, 1]; a constant stack maps to zeros.
    The NIR band, when present, is not used.
    """
    missing = [b for b in FUSION_ORDER if b not in s.bands]
    if missing:
        raise ValueError(f"missing bands for fusion: {missing}")
    stack = np.stack([np.asarray(s.bands[b], dtype=np.float64) for b in FUSION_ORDER])
    lo, hi = stack.min(), stack.max()
    if hi == lo:
        fused = np.zeros_like(stack)
    else:
        fused = (stack - lo) / (hi - lo)
    return Tensor(fused[None])


def band_hash(s: SpectralImage) -> str:
    h = hashlib.sha256()
    for name in FUSION_ORDER:
        band = np.ascontiguousarray(s.bands[name])
        h.update(name.encode())
        h.update(str(band.shape).encode())
        h.update(band.astype(band.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()[:16]


def fuse_to_cache(s: SpectralImage, cache_dir: str | os.PathLike) -> Path:
    """Write the fused pseudo-RGB image as PNG under a content-hash name; reuse it if present."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    out = cache_dir / f"{band_hash(s)}.png"
    if not out.exists():
        write_image(out, fuse_bands(s).data[0])
    return out


# -- datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetIndex:
    split: str
    items: tuple[tuple[Path, Path | None], ...]
    classes: tuple[str, ...]
    unmatched_labels: tuple[Path, ...] = ()

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Sample:
    name: str
    image: np.ndarray  # 3 x H x W, float in [0, 1]
    boxes: list[BBox]


@dataclass
class Dataset:
    samples: list[Sample]
    classes: tuple[str, ...] = ("object",)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def images(self, idx=None) -> np.ndarray:
        chosen = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in chosen])

    def boxes(self, idx=None) -> list[list[BBox]]:
        chosen = self.samples if idx is None else [self.samples[i] for i in idx]
        return [list(s.boxes) for s in chosen]


def _read_classes(root: Path, n_classes: int | None) -> tuple[str, ...]:
    f = root / "classes.txt"
    if f.exists():
        names = tuple(l.strip() for l in f.read_text().splitlines() if l.strip())
        if n_classes is not None and len(names) != n_classes:
            raise DatasetError(f"classes.txt lists {len(names)} classes, expected {n_classes}")
        return names
    return tuple(f"class{i}" for i in range(n_classes or 1))


def load_dataset(root: str | os.PathLike, split: str, n_classes: int | None = None) -> DatasetIndex:
    """Index ``images/<split>`` against ``labels/<split>`` by file stem, sorted by stem.

    Images without a label file are kept as background images (with a warning).
    Every label file is parsed so a bad one fails here, not mid-training.
    """
    root = Path(root)
    img_dir, lbl_dir = root / "images" / split, root / "labels" / split
    if not img_dir.is_dir():
        raise DatasetError(f"missing split directory {img_dir}")
    classes = _read_classes(root, n_classes)
    images = sorted((p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS), key=lambda p: p.stem)
    if not images:
        raise DatasetError(f"split {split!r} under {root} has no images")
    labels = {p.stem: p for p in lbl_dir.glob("*.txt")} if lbl_dir.is_dir() else {}
    items = []
    for img in images:
        lbl = labels.get(img.stem)
        if lbl is None:
            logger.warning("image %s has no label file; treated as background", img.name)
        else:
            load_labels(lbl.read_text(), len(classes))
        items.append((img, lbl))
    stems = {p.stem for p in images}
    unmatched = tuple(sorted(p for s, p in labels.items() if s not in stems))
    for p in unmatched:
        logger.warning("label %s has no matching image", p.name)
    return DatasetIndex(split, tuple(items), classes, unmatched)


def read_dataset(index: DatasetIndex) -> Dataset:
    samples = []
    for img, lbl in index.items:
        boxes = load_labels(lbl.read_text(), len(index.classes)) if lbl is not None else []
        samples.append(Sample(img.stem, read_image(img), boxes))
    return Dataset(samples, index.classes)


def write_dataset(ds: Dataset, root: str | os.PathLike, split: str) -> Path:
    root = Path(root)
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in ds.classes))
    for s in ds.samples:
        write_image(root / "images" / split / f"{s.name}.png", s.image)
        (root / "labels" / split / f"{s.name}.txt").write_text(serialize_labels(s.boxes))
    return root


# -- synthetic scenes ----------------------------------------------------------------


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.25, 0.45, size=3)
    img = np.empty((3, size, size))
    for c in range(3):
        field_ = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(1, 6, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[c] = base[c] + 0.05 * field_ / 3 + 0.02 * rng.standard_normal((size, size))
    return img


def shape_mask(kind: str, size: int, x1: int, y1: int, x2: int, y2: int) -> np.ndarray:
    """Boolean mask of a filled rectangle or ellipse inscribed in pixel box [x1, x2) x [y1, y2)."""
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rect":
        mask[y1:y2, x1:x2] = True
        return mask
    cy, cx = (y1 + y2 - 1) / 2, (x1 + x2 - 1) / 2
    ry, rx = (y2 - y1) / 2, (x2 - x1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = True
    return mask


def synth_dataset(seed: int, n_images: int, image_size: int = 128, n_classes: int = 1,
                  max_objects: int = 3, size_range: tuple[float, float] = (0.12, 0.45),
                  margin: float = 0.06) -> Dataset:
    """Filled ellipses/rectangles on smooth textured backgrounds.

    Labels are the tight bounding boxes of the rendered masks. Objects keep
    ``margin`` (fraction of the image) from the border and barely overlap.
    Class ``k`` objects get hue ``k`` of a fixed palette.
    """
    if image_size % 32:
        raise ValueError("image_size must be divisible by 32")
    palette = np.array([[0.95, 0.85, 0.1], [0.1, 0.8, 0.95], [0.95, 0.2, 0.6], [0.2, 0.95, 0.3]])
    rng = np.random.default_rng(seed)
    samples = []
    lo_px = int(round(margin * image_size))
    for n in range(n_images):
        img = _background(rng, image_size)
        boxes: list[BBox] = []
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(30):
                bw = int(rng.uniform(*size_range) * image_size)
                bh = int(np.clip(bw * rng.uniform(0.6, 1.6), size_range[0] * image_size, size_range[1] * image_size))
                x1 = int(rng.integers(lo_px, image_size - lo_px - bw + 1))
                y1 = int(rng.integers(lo_px, image_size - lo_px - bh + 1))
                cand = (x1, y1, x1 + bw, y1 + bh)
                if all(_overlap(cand, p) < 0.05 for p in placed):
                    break
            else:
                continue
            cls = int(rng.integers(0, n_classes))
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            mask = shape_mask(kind, image_size, *cand)
            color = palette[cls % len(palette)] * rng.uniform(0.85, 1.0)
            img[:, mask] = color[:, None] + 0.02 * rng.standard_normal((3, int(mask.sum())))
            ys, xs = np.nonzero(mask)
            mx1, my1, mx2, my2 = xs.min(), ys.min(), xs.max() + 1, ys.max() + 1
            placed.append(cand)
            boxes.append(BBox.from_xyxy(cls, mx1 / image_size, my1 / image_size, mx2 / image_size, my2 / image_size))
        # quantized to 8-bit levels so a PNG round-trip is lossless
        samples.append(Sample(f"synth_{seed}_{n:04d}", np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0, boxes))
    return Dataset(samples, tuple(f"class{i}" for i in range(n_classes)))


def _overlap(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
