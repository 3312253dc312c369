"""Binary cross-entropy over predicted probabilities.

Predictions are clamped into [1e-7, 1 - 1e-7] before the logs; the clamp
also zeroes the gradient outside that band.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .graph import Node, accumulate

CLAMP = 1e-7


def bce_value(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"bce shapes differ: {y_hat.shape} vs {y.shape}")
    p = np.clip(y_hat, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_loss(y_hat: Node, y: Node, name: str = "bce") -> Node:
    yv = y.value
    if y_hat.value.shape != yv.shape:
        raise ShapeError(f"bce shapes differ: {y_hat.value.shape} vs {yv.shape}")
    p = np.clip(y_hat.value, CLAMP, 1.0 - CLAMP)
    n = p.size
    value = -(yv * np.log(p) + (1.0 - yv) * np.log(1.0 - p)).sum() / n
    out = Node(np.asarray(value, dtype=y_hat.value.dtype), (y_hat,), name=name)
    inside = (y_hat.value >= CLAMP) & (y_hat.value <= 1.0 - CLAMP)

    def rule(g):
        accumulate(y_hat, g * inside * (p - yv) / (p * (1.0 - p)) / n)

    out.backward_rule = rule
    return out
