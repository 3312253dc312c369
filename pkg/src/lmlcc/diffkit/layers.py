"""Neural-network layers: array-level forwards plus graph ops with custom
backward rules.

Convolution is cross-correlation with 3x3x3 kernels, padding 1, stride 1
(same-size output), computed by an im2col/matmul route chunked over the
batch to bound peak memory. Array-level entry points accept either a single
sample [C, D, H, W] or a batch [N, C, D, H, W]; graph ops are batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .graph import Node, accumulate

KERNEL = 3
PAD = 1

# im2col buffers are chunked over the batch to stay cache-resident; this is
# the rough buffer budget in scalars.
_COL_BUDGET = 1 << 19


def _batch_chunk(n: int, ck: int, p: int) -> int:
    per_sample = max(ck * p, 1)
    return max(1, min(n, _COL_BUDGET // per_sample))


def _pad_spatial(x: np.ndarray) -> np.ndarray:
    n, c, d, h, w = x.shape
    xp = np.zeros((n, c, d + 2 * PAD, h + 2 * PAD, w + 2 * PAD), dtype=x.dtype)
    xp[:, :, PAD : PAD + d, PAD : PAD + h, PAD : PAD + w] = x
    return xp


def _im2col(xp: np.ndarray, d: int, h: int, w: int, buf: np.ndarray) -> np.ndarray:
    """[N, C, D+2, H+2, W+2] -> [N, C*27, D*H*W] patch matrix (into buf)."""
    n, c = xp.shape[:2]
    cols = buf[: n * c * KERNEL ** 3 * d * h * w].reshape(n, c, KERNEL ** 3, d, h, w)
    i = 0
    for dz in range(KERNEL):
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                cols[:, :, i] = xp[:, :, dz : dz + d, dy : dy + h, dx : dx + w]
                i += 1
    return cols.reshape(n, c * KERNEL ** 3, d * h * w)


def _check_conv_shapes(x: np.ndarray, k: np.ndarray, bias: np.ndarray) -> None:
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [N, C, D, H, W] input, got shape {x.shape}")
    if k.ndim != 5 or k.shape[2:] != (KERNEL, KERNEL, KERNEL):
        raise ShapeError(f"conv3d kernel must be [C_out, C_in, 3, 3, 3], got {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}"
        )
    if bias.shape != (k.shape[0],):
        raise ShapeError(f"conv3d bias must be [C_out], got {bias.shape}")


def _conv_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n, c, d, h, w = x.shape
    c_out = k.shape[0]
    kmat = k.reshape(c_out, c * KERNEL ** 3)
    out = np.empty((n, c_out, d, h, w), dtype=x.dtype)
    step = _batch_chunk(n, kmat.shape[1], d * h * w)
    buf = np.empty(step * c * KERNEL ** 3 * d * h * w, dtype=x.dtype)
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        xp = _pad_spatial(x[lo:hi])
        cols = _im2col(xp, d, h, w, buf)
        out[lo:hi] = (kmat @ cols).reshape(hi - lo, c_out, d, h, w)
    return out


def conv3d_forward(x: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlation with padding 1, stride 1; preserves spatial size.

    Accepts [C, D, H, W] or [N, C, D, H, W]; returns the same rank.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    k = np.asarray(k)
    bias = np.asarray(bias)
    _check_conv_shapes(x, k, bias)
    out = _conv_raw(x, k)
    out += bias.reshape(1, k.shape[0], 1, 1, 1)
    return out[0] if squeeze else out


def conv3d(x: Node, k: Node, bias: Node, name: str = "") -> Node:
    xv, kv, bv = x.value, k.value, bias.value
    _check_conv_shapes(xv, kv, bv)
    out = Node(conv3d_forward(xv, kv, bv), (x, k, bias), name=name)
    n, c, d, h, w = xv.shape
    c_out = kv.shape[0]

    def rule(g):
        g5 = np.ascontiguousarray(g.reshape(n, c_out, d, h, w))
        g3 = g5.reshape(n, c_out, d * h * w)
        # Kernel gradient: correlate upstream gradient against the im2col
        # patches, rebuilt chunk by chunk so the buffers stay in cache.
        dk = np.zeros((c_out, c * KERNEL ** 3), dtype=kv.dtype)
        step = _batch_chunk(n, c * KERNEL ** 3, d * h * w)
        buf = np.empty(step * c * KERNEL ** 3 * d * h * w, dtype=xv.dtype)
        for lo in range(0, n, step):
            hi = min(lo + step, n)
            xp = _pad_spatial(xv[lo:hi])
            cols = _im2col(xp, d, h, w, buf)
            dk += np.tensordot(g3[lo:hi], cols, axes=([0, 2], [0, 2]))
        # Input gradient of a same-padded cross-correlation is itself a
        # cross-correlation of the upstream gradient with the kernel
        # transposed in channels and flipped spatially.
        kt = np.ascontiguousarray(kv.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        accumulate(x, _conv_raw(g5, kt))
        accumulate(k, dk.reshape(kv.shape))
        accumulate(bias, g3.sum(axis=(0, 2)))

    out.backward_rule = rule
    return out


def maxpool3d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pooling with stride 2. Returns (pooled, argmax) where
    argmax holds the flat within-block winner (first index on ties)."""
    x = np.asarray(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects [N, C, D, H, W], got shape {x.shape}")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d requires even spatial extents, got {(d, h, w)}")
    blocks = (
        x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // 2, h // 2, w // 2, 8)
    )
    arg = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        return pooled[0], arg[0]
    return pooled, arg


def maxpool3d(x: Node, name: str = "") -> Node:
    pooled, arg = maxpool3d_forward(x.value)
    out = Node(pooled, (x,), name=name)
    n, c, d, h, w = x.value.shape

    def rule(g):
        dblocks = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=g.dtype)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dx = (
            dblocks.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d, h, w)
        )
        accumulate(x, dx)

    out.backward_rule = rule
    return out


@dataclass
class BnState:
    """Running statistics for one batch-normalized channel block."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "BnState":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # fraction of the old running statistic kept per update


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x: np.ndarray) -> tuple[int, ...]:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    state: BnState,
    train: bool,
) -> np.ndarray:
    """Normalize per channel; in train mode uses batch statistics and
    updates the running ones, in eval mode uses the running statistics."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects [N, C, ...], got shape {x.shape}")
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if train:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        state.mean[:] = BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mu
        state.var[:] = BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * var
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    return gamma.reshape(shape) * xhat + beta.reshape(shape)


def batchnorm(
    x: Node,
    gamma: Node,
    beta: Node,
    state: BnState,
    train: bool,
    name: str = "",
) -> Node:
    xv = x.value
    axes = _bn_axes(xv)
    shape = _bn_shape(xv)
    if train:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        state.mean[:] = BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mu
        state.var[:] = BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * var
    else:
        mu = state.mean.astype(xv.dtype)
        var = state.var.astype(xv.dtype)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mu.reshape(shape)) * inv.reshape(shape)
    out = Node(gamma.value.reshape(shape) * xhat + beta.value.reshape(shape), (x, gamma, beta), name=name)
    m = xv.size // xv.shape[1]

    def rule(g):
        accumulate(gamma, (g * xhat).sum(axis=axes))
        accumulate(beta, g.sum(axis=axes))
        gscaled = g * gamma.value.reshape(shape)
        if train:
            # Batch statistics depend on x, so the normalization couples
            # every sample in the batch.
            s1 = gscaled.sum(axis=axes, keepdims=True)
            s2 = (gscaled * xhat).sum(axis=axes, keepdims=True)
            dx = inv.reshape(shape) * (gscaled - s1 / m - xhat * s2 / m)
        else:
            dx = gscaled * inv.reshape(shape)
        accumulate(x, dx)

    out.backward_rule = rule
    return out


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes incompatible: x {x.shape}, w {w.shape}")
    return x @ w + b


def dense(x: Node, w: Node, b: Node, name: str = "") -> Node:
    out = Node(dense_forward(x.value, w.value, b.value), (x, w, b), name=name)

    def rule(g):
        accumulate(x, g @ w.value.T)
        accumulate(w, x.value.T @ g)
        accumulate(b, g.sum(axis=0))

    out.backward_rule = rule
    return out


def dropout(x: Node, rate: float, rng: np.random.Generator | None, train: bool, name: str = "") -> Node:
    """Inverted dropout: train mode zeroes a ``rate`` fraction and rescales
    by 1/(1-rate); eval mode is the identity."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.value.shape) < keep).astype(x.value.dtype) / keep
    out = Node(x.value * mask, (x,), name=name)

    def rule(g):
        accumulate(x, g * mask)

    out.backward_rule = rule
    return out
