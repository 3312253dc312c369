"""Central finite-difference validation of backward rules.

``f`` must be a pure, deterministic function mapping a list of input arrays
to ``(loss_node, leaves)`` where ``leaves`` are the graph inputs built from
those arrays, in the same order. The checker backpropagates once for the
analytic gradients, then perturbs each input coordinate by +-h.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .graph import Node, backward


def grad_check(
    f: Callable[[list[np.ndarray]], tuple[Node, Sequence[Node]]],
    inputs: Sequence[np.ndarray],
    h: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8). With
    ``max_coords`` set, at most that many coordinates per input are probed
    (deterministically from ``rng``), for large graphs.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    loss, leaves = f([x.copy() for x in inputs])
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    backward(loss)
    analytic = [
        np.zeros_like(x) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)
        for x, leaf in zip(inputs, leaves)
    ]

    worst = 0.0
    for i, x in enumerate(inputs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(x.size, size=max_coords, replace=False)
        flat_a = analytic[i].ravel()
        for j in coords:
            probe = [inp.copy() for inp in inputs]
            probe[i].ravel()[j] += h
            up = float(f(probe)[0].value)
            probe[i].ravel()[j] -= 2 * h
            down = float(f(probe)[0].value)
            numeric = (up - down) / (2 * h)
            a = flat_a[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def sample_away_from_kinks(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    margin: float,
    low: float = -1.0,
    high: float = 1.0,
    kinks: Sequence[float] = (0.0,),
) -> np.ndarray:
    """Uniform samples resampled until every entry is at least ``margin``
    away from each kink location (for ReLU/max-style nondifferentiabilities)."""
    x = rng.uniform(low, high, size=shape)
    for _ in range(100):
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
    raise RuntimeError("could not sample away from kinks")
