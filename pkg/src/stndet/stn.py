"""Spatial transformer: localization net, affine grid generator, bilinear sampler.

Coordinates are normalized to [-1, 1] with align-corners semantics: -1 and
+1 sit on the centers of the first and last pixel. The affine maps *target*
(output) coordinates to *source* (input) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# pixel coordinates closer than this to an integer are snapped onto it, so an
# identity warp reproduces the input bit-exactly
_SNAP = 1e-9


def lattice(n: int) -> np.ndarray:
    """Regular target coordinates along one axis."""
    if n < 1:
        raise ValueError("grid size must be >= 1")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


@dataclass
class SamplingGrid:
    """Source coordinates ``coords[n, i, j] = (x_s, y_s)`` for every output pixel."""

    coords: Tensor  # (N, H', W', 2)
    target: np.ndarray  # (H', W', 2) regular lattice (x_t, y_t)

    @property
    def out_h(self) -> int:
        return self.target.shape[0]

    @property
    def out_w(self) -> int:
        return self.target.shape[1]


def _as_theta(theta) -> Tensor:
    t = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta, dtype=np.float64))
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.ndim != 2 or t.shape[1] != 6:
        raise ValueError(f"affine parameters must have shape (N, 6), got {t.shape}")
    return t


def generate_grid(theta, out_h: int, out_w: int) -> SamplingGrid:
    """Apply ``(x_s, y_s) = A_theta @ (x_t, y_t, 1)`` at every lattice point."""
    theta = _as_theta(theta)
    if not np.all(np.isfinite(theta.data)):
        raise ValueError("affine parameters must be finite")
    yt, xt = np.meshgrid(lattice(out_h), lattice(out_w), indexing="ij")
    target = np.stack([xt, yt], axis=-1)
    th = theta.data.astype(np.float64)[:, :, None, None]
    xs = th[:, 0] * xt + th[:, 1] * yt + th[:, 2]
    ys = th[:, 3] * xt + th[:, 4] * yt + th[:, 5]
    coords = np.stack([xs, ys], axis=-1).astype(theta.dtype)

    def backward(g):
        gx, gy = g[..., 0], g[..., 1]
        out = np.stack(
            [(gx * xt).sum((1, 2)), (gx * yt).sum((1, 2)), gx.sum((1, 2)),
             (gy * xt).sum((1, 2)), (gy * yt).sum((1, 2)), gy.sum((1, 2))],
            axis=1,
        )
        return (out.astype(theta.dtype),)

    return SamplingGrid(Tensor._make(coords, (theta,), backward), target)


def _pixel_coords(norm: np.ndarray, size: int) -> np.ndarray:
    p = (norm.astype(np.float64) + 1.0) * 0.5 * (size - 1)
    r = np.rint(p)
    return np.where(np.abs(p - r) < _SNAP, r, p)


def sample(image: Tensor, grid: SamplingGrid) -> Tensor:
    """Bilinear sampling of ``image`` at ``grid`` with zero padding.

    Every channel is warped by the same grid. Corners falling outside the
    image contribute zero.
    """
    n, c, h, w = image.shape
    coords = grid.coords
    if coords.shape[0] != n:
        raise ValueError(f"grid batch {coords.shape[0]} != image batch {n}")
    oh, ow = coords.shape[1], coords.shape[2]
    px = _pixel_coords(coords.data[..., 0], w).reshape(n, -1)
    py = _pixel_coords(coords.data[..., 1], h).reshape(n, -1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    flat = image.data.reshape(n, c, h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        vals = np.take_along_axis(flat, idx[:, None, :], axis=2) * valid[:, None, :]
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        corners.append((idx, valid, vals, wx, wy))

    out = np.zeros((n, c, oh * ow), dtype=image.dtype)
    for idx, valid, vals, wx, wy in corners:
        out += (wx * wy).astype(image.dtype)[:, None, :] * vals
    out = out.reshape(n, c, oh, ow)

    def backward(g):
        g = g.reshape(n, c, oh * ow)
        g_img = None
        if image.requires_grad:
            offsets = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, valid, vals, wx, wy in corners:
                wgt = (wx * wy * valid)[:, None, :] * g
                flat_idx = offsets + idx[:, None, :]
                acc += np.bincount(flat_idx.ravel(), weights=wgt.ravel(), minlength=acc.size)
            g_img = acc.reshape(n, c, h, w).astype(image.dtype)
        g_grid = None
        if coords.requires_grad:
            v00, v01, v10, v11 = (cr[2] for cr in corners)
            dpx = (1.0 - fy)[:, None, :] * (v01 - v00) + fy[:, None, :] * (v11 - v10)
            dpy = (1.0 - fx)[:, None, :] * (v10 - v00) + fx[:, None, :] * (v11 - v01)
            gx = (g * dpx).sum(axis=1) * (0.5 * (w - 1))
            gy = (g * dpy).sum(axis=1) * (0.5 * (h - 1))
            g_grid = np.stack([gx, gy], axis=-1).reshape(n, oh, ow, 2).astype(coords.dtype)
        return g_img, g_grid

    return Tensor._make(out, (image, coords), backward)


class ShallowFeatures(Module):
    """conv 7x7 (3 -> 8) -> max-pool 2x2 -> ReLU -> adaptive average pool S x S."""

    def __init__(self, pool_size: int = 28, channels: int = 8, rng=None, dtype=np.float64):
        self.pool_size = pool_size
        self.channels = channels
        self.conv = Conv2d(3, channels, 7, stride=1, padding=3, rng=rng, dtype=dtype)

    @property
    def out_features(self) -> int:
        return self.channels * self.pool_size * self.pool_size

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        x = F.max_pool2d(x, 2, 2)
        x = F.relu(x)
        x = F.adaptive_avg_pool2d(x, self.pool_size, self.pool_size)
        return F.flatten(x)


class LocalizationNet(Module):
    """Feature extractor followed by a regression layer emitting six affine parameters.

    ``features`` may be any module mapping an N x 3 x H x W image to N x F
    features and exposing ``out_features``. The regression layer starts at
    zero weight and identity bias, so a fresh net predicts the identity warp.
    """

    def __init__(self, pool_size: int = 28, features: Module | None = None, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.features = features if features is not None else ShallowFeatures(pool_size, rng=rng, dtype=dtype)
        self.regress = Linear(self.features.out_features, 6, rng=rng, dtype=dtype)
        self.regress.weight.data[...] = 0.0
        self.regress.bias.data[...] = IDENTITY_THETA

    def forward(self, image: Tensor) -> Tensor:
        return self.regress(self.features(image))

    def freeze_to(self, theta) -> "LocalizationNet":
        """Pin the output to a constant ``theta`` and stop all training of this net."""
        self.regress.weight.data[...] = 0.0
        self.regress.bias.data[...] = np.asarray(theta, dtype=self.regress.bias.dtype)
        return self.freeze()


def localize(net: LocalizationNet, image: Tensor) -> Tensor:
    """Affine parameters (N, 6) predicted for each image."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"localization expects N x 3 x H x W, got {image.shape}")
    return net(image)


def stn_forward(net: LocalizationNet, image: Tensor) -> Tensor:
    """Warp ``image`` by the affine the net predicts for it (output keeps the input size)."""
    return warp(image, localize(net, image))


def warp(image: Tensor, theta) -> Tensor:
    return sample(image, generate_grid(theta, image.shape[2], image.shape[3]))


# -- conversions between normalized affines and pixel-space affines -----------


def _norm_scale(h: int, w: int) -> np.ndarray:
    return np.diag([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)])


def theta_to_pixel(theta, h: int, w: int) -> np.ndarray:
    """Express a normalized 2x3 affine as a 2x3 affine on continuous pixel coordinates.

    Continuous pixel coordinates put the image edges at 0 and W (resp. H),
    so pixel ``i`` has its center at ``i + 0.5``.
    """
    a = np.asarray(theta, dtype=np.float64).reshape(2, 3)
    s = _norm_scale(h, w)
    s_inv = np.linalg.inv(s)
    center = np.array([w / 2.0, h / 2.0])
    lin = s_inv @ a[:, :2] @ s
    trans = center + s_inv @ a[:, 2] - lin @ center
    return np.hstack([lin, trans[:, None]])


def pixel_to_theta(affine, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`theta_to_pixel`; returns the six normalized parameters."""
    m = np.asarray(affine, dtype=np.float64).reshape(2, 3)
    s = _norm_scale(h, w)
    s_inv = np.linalg.inv(s)
    center = np.array([w / 2.0, h / 2.0])
    lin = s @ m[:, :2] @ s_inv
    trans = s @ (m[:, :2] @ center + m[:, 2] - center)
    return np.hstack([lin, trans[:, None]]).reshape(6)
