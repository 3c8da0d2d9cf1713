"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """d fn()/d x by central differences, at every index in ``indices`` (default: all)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx_iter = range(flat.size) if indices is None else indices
    for i in idx_iter:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data.sum())
        flat[i] = orig - h
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with 0 when both vanish."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(num / den)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``.

    ``fn`` must rebuild the graph from the current ``inputs`` values and
    return a tensor; its sum is differentiated. With ``max_coords`` only a
    random subset of coordinates per input is compared.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    out.sum().backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        if max_coords is not None and x.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(x.size, size=max_coords, replace=False)
            numeric = numeric_grad(fn, x, h, idx).reshape(-1)[idx]
            analytic = analytic.reshape(-1)[idx]
        else:
            numeric = numeric_grad(fn, x, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
