"""Learnable intensity-window branching.

A volume with values in [0, 1] is split into N branches. Branch i keeps the
intensities between consecutive cut points c_{i-1} and c_i via a soft
sigmoid window of softness ``tau``; the outermost edges are pinned to 0 and
1 so the window masks telescope to an exact partition of unity, and the
masked branches sum back to the input.

Cut points are reparameterized through positive softplus increments, so any
raw parameter vector theta yields strictly increasing cuts inside (0, 1) —
an unconstrained optimizer can never produce crossing windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffkit import graph
from .diffkit.graph import Node
from .errors import ConfigError

DEFAULT_TAU = 0.05
MIN_INCREMENT = 1e-4

CUTS_MODES = ("learnable", "fixed")
CUTS_INITS = ("constant", "random")


@dataclass
class CutVector:
    """Raw window parameters: N branches need N positive increments, whose
    normalized partial sums give the N-1 interior cut points."""

    n_branches: int
    theta: np.ndarray
    tau: float = DEFAULT_TAU
    mode: str = "learnable"
    init: str = "constant"

    def __post_init__(self):
        if self.n_branches < 1:
            raise ConfigError(f"n_branches must be >= 1, got {self.n_branches}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_branches,):
            raise ConfigError(
                f"theta must have length n_branches={self.n_branches}, got {self.theta.shape}"
            )
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.mode not in CUTS_MODES:
            raise ConfigError(f"mode must be one of {CUTS_MODES}, got {self.mode!r}")
        if self.init not in CUTS_INITS:
            raise ConfigError(f"init must be one of {CUTS_INITS}, got {self.init!r}")

    @classmethod
    def make(
        cls,
        n_branches: int,
        mode: str = "learnable",
        init: str = "constant",
        rng: np.random.Generator | None = None,
        tau: float = DEFAULT_TAU,
    ) -> "CutVector":
        """Constant init gives equal intervals (theta = 0); random init
        draws theta ~ Uniform(-1, 1) from ``rng``."""
        if init == "random":
            if rng is None:
                raise ConfigError("random init needs an rng")
            theta = rng.uniform(-1.0, 1.0, size=n_branches)
        else:
            theta = np.zeros(n_branches)
        return cls(n_branches=n_branches, theta=theta, tau=tau, mode=mode, init=init)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def cuts_from_theta(cv: CutVector) -> np.ndarray:
    """Interior cut positions c_1..c_{N-1}, strictly increasing in (0, 1)."""
    d = _softplus(cv.theta) + MIN_INCREMENT
    return np.cumsum(d)[:-1] / d.sum()


def window_mask(
    x: np.ndarray,
    c_lo: float,
    c_hi: float,
    tau: float,
    edge_lo: bool = False,
    edge_hi: bool = False,
) -> np.ndarray:
    """Soft window weight in [0, 1]: rises at c_lo, falls at c_hi.

    Pinning an edge replaces its sigmoid with the constant 1 (low) or
    0 (high), which is what makes the branch masks telescope.
    """
    if not edge_lo and not edge_hi and not c_lo < c_hi:
        raise ConfigError(f"window needs c_lo < c_hi, got ({c_lo}, {c_hi})")
    x = np.asarray(x)
    lower = np.ones_like(x) if edge_lo else _sigmoid_np((x - c_lo) / tau)
    upper = np.zeros_like(x) if edge_hi else _sigmoid_np((x - c_hi) / tau)
    return lower - upper


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[np.logical_not(pos)])
    out[np.logical_not(pos)] = ex / (1.0 + ex)
    return out


@dataclass
class BranchSet:
    """Forward result: per-branch soft masks and masked volumes."""

    masks: list[np.ndarray]
    branches: list[np.ndarray]
    include_original: bool
    cuts: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_branches(self) -> int:
        return len(self.branches)


def branch_forward(v: np.ndarray, cv: CutVector, include_original: bool = False) -> BranchSet:
    """Array-level branching: branch_i = v * w_i(v), plus the unmasked
    input as a last branch when requested."""
    cuts = cuts_from_theta(cv)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    masks = []
    branches = []
    for i in range(cv.n_branches):
        w = window_mask(
            v,
            edges[i],
            edges[i + 1],
            cv.tau,
            edge_lo=(i == 0),
            edge_hi=(i == cv.n_branches - 1),
        )
        masks.append(w)
        branches.append(v * w)
    if include_original:
        masks.append(np.ones_like(v))
        branches.append(v.copy())
    return BranchSet(masks=masks, branches=branches, include_original=include_original, cuts=cuts)


def cuts_node(theta: Node) -> Node:
    """Graph version of cuts_from_theta: N-1 interior cuts from raw theta."""
    d = graph.softplus(theta) + MIN_INCREMENT
    partial = graph.cumsum(d)
    total = partial[len(d.value) - 1]
    return partial[: len(d.value) - 1] / total


def branch_nodes(
    x: Node, theta: Node, cv: CutVector, include_original: bool = False
) -> tuple[list[Node], Node | None]:
    """Graph branching of ``x`` (any shape) against learnable ``theta``.

    Returns ([branch nodes], cuts node or None for a single branch). The
    branches carry x * w_i(x) so gradients flow to both x and theta.
    """
    n = cv.n_branches
    inv_tau = 1.0 / cv.tau
    if n == 1:
        branches = [x]
        cuts = None
    else:
        cuts = cuts_node(theta)
        # Upper sigmoids sigma((x - c_i)/tau) for i = 1..N-1; branch i mask
        # is U_{i-1} - U_i with U_0 = 1 and U_N = 0 pinned.
        uppers = [graph.sigmoid((x - cuts[i]) * inv_tau) for i in range(n - 1)]
        branches = []
        for i in range(n):
            if i == 0:
                w = 1.0 - uppers[0]
            elif i == n - 1:
                w = uppers[n - 2]
            else:
                w = uppers[i - 1] - uppers[i]
            branches.append(x * w)
    if include_original:
        branches.append(x)
    return branches, cuts
