"""Loss functions returning (value, gradient w.r.t. the prediction)."""

from __future__ import annotations

import numpy as np

BCE_CLAMP = 1e-7


def binary_cross_entropy(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (pc - y) / (pc * (1.0 - pc)) / p.size
    # clamped entries have zero derivative
    grad = np.where((p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP), grad, 0.0).astype(p.dtype)
    return float(loss), grad


def mean_squared_error(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = np.asarray(pred) - np.asarray(target, dtype=np.asarray(pred).dtype)
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff
