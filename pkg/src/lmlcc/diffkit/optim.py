"""Adam with bias correction, plus a reduce-on-plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> Mapping[str, np.ndarray]:
    """One Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
    return params


@dataclass
class ReduceLROnPlateau:
    """Halve the learning rate once a metric stops improving.

    After ``patience`` epochs with no new best, every further epoch without
    improvement multiplies the rate by ``factor``; the rate never drops
    below ``floor`` (it clamps there exactly).
    """

    factor: float = 0.5
    patience: int = 10
    floor: float = 1e-6
    best: float = float("inf")
    stale: int = 0

    def step(self, metric: float, state: AdamState) -> float:
        if metric < self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                state.lr = max(state.lr * self.factor, self.floor)
        return state.lr
