"""EigenCAM heatmaps: project activations onto their dominant singular direction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    layer: str = ""
    degenerate: bool = False  # all-zero activations


def power_iteration(gram: np.ndarray, max_iter: int = 500, tol: float = 1e-10,
                    v0: np.ndarray | None = None) -> tuple[np.ndarray, float, int]:
    """Dominant eigenpair of a symmetric PSD matrix.

    Each step multiplies by the current power of ``gram`` and then squares that
    power, so the effective exponent doubles per iteration and small spectral
    gaps still converge quickly. Stops once ``||G v - lambda v|| / lambda < tol``.
    Returns (v, lambda, iterations).
    """
    n = gram.shape[0]
    v = np.ones(n) / np.sqrt(n) if v0 is None else v0 / np.linalg.norm(v0)
    scale = np.linalg.norm(gram)
    if scale == 0.0:
        return v, 0.0, 1
    power = gram / scale
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = power @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector orthogonal to the dominant space; restart from a fixed generic vector
            w = power @ np.cos(np.arange(1, n + 1))
            norm = np.linalg.norm(w)
        v = w / norm
        gv = gram @ v
        lam = float(v @ gv)
        if np.linalg.norm(gv - lam * v) <= tol * lam:
            return v, lam, it
        power = power @ power
        power /= np.linalg.norm(power)
    logger.warning("power iteration hit %d iterations without reaching tol %g", max_iter, tol)
    return v, lam, max_iter


def _principal_scores(m: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    c, p = m.shape
    if c <= p:
        u, _, _ = power_iteration(m @ m.T, max_iter, tol)
        scores = m.T @ u
    else:
        scores, _, _ = power_iteration(m.T @ m, max_iter, tol)
    if scores[np.argmax(np.abs(scores))] < 0:
        scores = -scores
    return scores


def principal_projection(m: np.ndarray, max_iter: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Unit-norm projection of the columns of ``m`` (C x P) on the first principal axis.

    Equal to the first right singular vector of ``m``; the sign is chosen so
    the largest-magnitude entry is positive. Iterates on the smaller Gram matrix.
    """
    scores = _principal_scores(m, max_iter, tol)
    norm = np.linalg.norm(scores)
    return scores / norm if norm > 0 else scores


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def eigencam(activations, layer: str = "", max_iter: int = 500, tol: float = 1e-10) -> Heatmap:
    """Heatmap from one image's activations (1 x C x H x W or C x H x W)."""
    a = np.asarray(activations.data if isinstance(activations, Tensor) else activations, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("eigencam expects activations for a single image")
        a = a[0]
    c, h, w = a.shape
    m = a.reshape(c, h * w)
    if not np.any(m):
        return Heatmap(np.zeros((h, w)), layer, degenerate=True)
    # min-max absorbs the scale, so the unnormalized scores are used directly
    scores = _principal_scores(m, max_iter, tol)
    return Heatmap(minmax(scores).reshape(h, w), layer)


def upsample(values: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with align-corners sampling."""
    sh, sw = values.shape
    ys = np.linspace(0, sh - 1, h) if sh > 1 else np.zeros(h)
    xs = np.linspace(0, sw - 1, w) if sw > 1 else np.zeros(w)
    y0 = np.minimum(np.floor(ys).astype(int), max(sh - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(sw - 2, 0))
    y1, x1 = np.minimum(y0 + 1, sh - 1), np.minimum(x0 + 1, sw - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def jet(x: np.ndarray) -> np.ndarray:
    """Piecewise-linear jet colormap, values in [0, 1] -> RGB in [0, 1] (last axis)."""
    x = np.clip(x, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def overlay(heatmap: Heatmap, image, alpha: float = 0.5) -> np.ndarray:
    """Blend the colorized heatmap over a grayscale copy of ``image`` (3 x H x W in [0, 1]).

    Blend weight is ``alpha * heat`` per pixel, so zero heat leaves the grayscale base.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    h, w = img.shape[1:]
    gray = img.mean(axis=0) if img.shape[0] == 3 else img[0]
    heat = upsample(heatmap.values, h, w)
    color = jet(heat).transpose(2, 0, 1)
    wgt = alpha * heat
    return gray[None] * (1.0 - wgt) + color * wgt


def save_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
