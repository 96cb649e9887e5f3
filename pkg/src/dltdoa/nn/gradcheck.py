"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a| + |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                     indices: list[tuple] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    Only ``indices`` are evaluated when given; other entries are NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    for idx in (indices if indices is not None else list(np.ndindex(x.shape))):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def sample_indices(shape: tuple, n: int, rng: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape))
    if total <= n:
        return list(np.ndindex(shape))
    flat = rng.choice(total, size=n, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in sorted(flat)]


def check_model(model, x: np.ndarray, loss_fn: Callable, training: bool = False, h: float = 1e-5,
                per_tensor: int | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter tensor (and ``"input"``) for ``model``.

    ``loss_fn(output) -> (loss, dloss/doutput)``. With ``per_tensor`` set,
    only that many randomly chosen entries of each tensor are probed.
    """
    rng = np.random.default_rng(seed)

    def f() -> float:
        return loss_fn(model.forward(x, training))[0]

    out = model.forward(x, training)
    _, g = loss_fn(out)
    dx = model.backward(g)
    analytic = {k: v.copy() for k, v in model.named_gradients().items()}
    analytic["input"] = dx.copy()
    targets = dict(model.named_parameters())
    targets["input"] = x
    errors = {}
    for name, arr in targets.items():
        idx = sample_indices(arr.shape, per_tensor, rng) if per_tensor else None
        num = numeric_gradient(f, arr, h, idx)
        a = analytic[name]
        if idx is not None:
            a = np.array([a[i] for i in idx])
            num = np.array([num[i] for i in idx])
        errors[name] = float(np.max(relative_error(a, num))) if a.size else 0.0
    return errors
