"""Backbone 3D CNN and the multi-branch intensity-window network.

Every conv block is Conv3D(3x3x3, pad 1) -> BatchNorm -> ReLU, with max
pooling and dropout after configured conv indices, then a dense stack with
ReLU between layers and a sigmoid on the final scalar. The multi-branch
model feeds each soft intensity window through its own feature extractor
(independent weights), flattens and concatenates the branch features, and
shares one dense head.

Two scales exist: the full 12-conv configuration, and a 4-conv desk scale
that trains in minutes on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffkit import graph
from .diffkit.graph import Node
from .diffkit.layers import BnState, batchnorm, conv3d, dense, dropout, maxpool3d
from .errors import ConfigError, ShapeError
from .huwindow import CUTS_INITS, CUTS_MODES, DEFAULT_TAU, CutVector, branch_nodes, cuts_from_theta

DROPOUT_RATE = 0.3

FULL_CONV_CHANNELS = (16, 16, 16, 32, 32, 32, 64, 64, 64, 128, 128, 128)
FULL_DENSE = (512, 256, 128, 64, 1)
DESK_CONV_CHANNELS = (4, 4, 8, 8)
DESK_DENSE = (32, 1)


@dataclass(frozen=True)
class BackboneConfig:
    conv_channels: tuple[int, ...]
    pool_after: tuple[int, ...]  # 1-based conv indices followed by a pool
    dropout_after: tuple[int, ...]
    dense_widths: tuple[int, ...]
    patch_side: int
    scale: str  # "full" | "desk"

    def __post_init__(self):
        expected = {"full": (12, 4, 2, 5), "desk": (4, 2, 1, 2)}
        if self.scale not in expected:
            raise ConfigError(f"scale must be full or desk, got {self.scale!r}")
        counts = (
            len(self.conv_channels),
            len(self.pool_after),
            len(self.dropout_after),
            len(self.dense_widths),
        )
        if counts != expected[self.scale]:
            raise ConfigError(
                f"{self.scale} scale requires (convs, pools, dropouts, dense) = "
                f"{expected[self.scale]}, got {counts}"
            )
        if self.dense_widths[-1] != 1:
            raise ConfigError("dense widths must end in 1")
        for idx in self.pool_after + self.dropout_after:
            if not 1 <= idx <= len(self.conv_channels):
                raise ConfigError(f"layer index {idx} out of range")
        if self.patch_side % (2 ** len(self.pool_after)) != 0:
            raise ConfigError(
                f"patch side {self.patch_side} not divisible by "
                f"2^{len(self.pool_after)} pools"
            )

    @classmethod
    def full(cls, patch_side: int = 32) -> "BackboneConfig":
        return cls(
            conv_channels=FULL_CONV_CHANNELS,
            pool_after=(3, 6, 9, 12),
            dropout_after=(6, 12),
            dense_widths=FULL_DENSE,
            patch_side=patch_side,
            scale="full",
        )

    @classmethod
    def desk(cls, patch_side: int = 16, conv_channels: tuple[int, ...] = DESK_CONV_CHANNELS,
             dense_widths: tuple[int, ...] = DESK_DENSE) -> "BackboneConfig":
        # Pooling right after the first conv keeps the later convs on the
        # downsampled grid, which is what makes CPU training quick.
        return cls(
            conv_channels=conv_channels,
            pool_after=(1, 3),
            dropout_after=(4,),
            dense_widths=dense_widths,
            patch_side=patch_side,
            scale="desk",
        )

    @property
    def feature_side(self) -> int:
        return self.patch_side // (2 ** len(self.pool_after))

    @property
    def flat_width(self) -> int:
        return self.conv_channels[-1] * self.feature_side ** 3


@dataclass(frozen=True)
class LmlccConfig:
    """Multi-branch configuration. Feature extractors are never shared
    between branches; only the dense head is."""

    n_branches: int
    include_original: bool
    cuts_mode: str  # "learnable" | "fixed"
    init: str  # "constant" | "random"
    backbone: BackboneConfig
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.n_branches < 1:
            raise ConfigError(f"n_branches must be >= 1, got {self.n_branches}")
        if self.cuts_mode not in CUTS_MODES:
            raise ConfigError(f"cuts_mode must be one of {CUTS_MODES}")
        if self.init not in CUTS_INITS:
            raise ConfigError(f"init must be one of {CUTS_INITS}")

    @property
    def total_branches(self) -> int:
        return self.n_branches + (1 if self.include_original else 0)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _init_extractor(params, bn_states, prefix, cfg: BackboneConfig, rng, dtype) -> None:
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels, start=1):
        params[f"{prefix}conv{i}.w"] = _he_uniform(rng, (c_out, c_in, 3, 3, 3), c_in * 27, dtype)
        params[f"{prefix}conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        params[f"{prefix}bn{i}.gamma"] = np.ones(c_out, dtype=dtype)
        params[f"{prefix}bn{i}.beta"] = np.zeros(c_out, dtype=dtype)
        bn_states[f"{prefix}bn{i}"] = BnState.initial(c_out, dtype=dtype)
        c_in = c_out


def _init_head(params, prefix, in_width: int, dense_widths, rng, dtype) -> None:
    for j, width in enumerate(dense_widths, start=1):
        params[f"{prefix}dense{j}.w"] = _he_uniform(rng, (in_width, width), in_width, dtype)
        params[f"{prefix}dense{j}.b"] = np.zeros(width, dtype=dtype)
        in_width = width


def _extractor_nodes(
    params: dict[str, Node],
    bn_states: dict[str, BnState],
    prefix: str,
    x: Node,
    cfg: BackboneConfig,
    train: bool,
    rng,
    capture: dict | None,
) -> Node:
    h = x
    last_conv = len(cfg.conv_channels)
    for i in range(1, last_conv + 1):
        h = conv3d(h, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"],
                   name=f"{prefix}conv{i}")
        h = batchnorm(h, params[f"{prefix}bn{i}.gamma"], params[f"{prefix}bn{i}.beta"],
                      bn_states[f"{prefix}bn{i}"], train, name=f"{prefix}bn{i}")
        h = graph.relu(h)
        if i == last_conv and capture is not None:
            capture.setdefault("features", []).append(h)
        if i in cfg.pool_after:
            h = maxpool3d(h, name=f"{prefix}pool{i}")
        if i in cfg.dropout_after:
            h = dropout(h, DROPOUT_RATE, rng, train, name=f"{prefix}drop{i}")
    return h.reshape((h.value.shape[0], -1))


def _head_nodes(params, prefix, h: Node, dense_widths, capture: dict | None) -> Node:
    n_dense = len(dense_widths)
    for j in range(1, n_dense + 1):
        h = dense(h, params[f"{prefix}dense{j}.w"], params[f"{prefix}dense{j}.b"],
                  name=f"{prefix}dense{j}")
        if j < n_dense:
            h = graph.relu(h)
    if capture is not None:
        capture["logit"] = h
    return graph.sigmoid(h)


def _as_batch(x: np.ndarray, patch_side: int, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (patch_side,) * 3:
        raise ShapeError(
            f"expected patches of side {patch_side}, got array shape {x.shape}"
        )
    return x


class BackboneModel:
    """Single-branch 3D CNN mapping a [0,1] patch to a malignancy
    probability."""

    kind = "backbone"

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.bn_states: dict[str, BnState] = {}
        rng = np.random.default_rng(seed)
        _init_extractor(self.params, self.bn_states, "", cfg, rng, self.dtype)
        _init_head(self.params, "", cfg.flat_width, cfg.dense_widths, rng, self.dtype)

    def trainable_names(self) -> list[str]:
        return list(self.params)

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture: dict | None = None,
    ) -> tuple[Node, dict[str, Node]]:
        x = _as_batch(x, self.cfg.patch_side, self.dtype)
        nodes = {name: graph.leaf(arr, name=name) for name, arr in self.params.items()}
        h = _extractor_nodes(nodes, self.bn_states, "", graph.constant(x, name="input"),
                             self.cfg, train, rng, capture)
        prob = _head_nodes(nodes, "", h, self.cfg.dense_widths, capture)
        return prob, nodes

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


class LmlccModel:
    """Multi-branch network: learnable intensity windows feeding
    independent extractors and a shared dense head."""

    kind = "lmlcc"

    def __init__(self, cfg: LmlccConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.bn_states: dict[str, BnState] = {}
        rng = np.random.default_rng(seed)
        for b in range(cfg.total_branches):
            _init_extractor(self.params, self.bn_states, f"branch{b}.", cfg.backbone, rng, self.dtype)
        head_in = cfg.total_branches * cfg.backbone.flat_width
        _init_head(self.params, "head.", head_in, cfg.backbone.dense_widths, rng, self.dtype)
        self.cut_vector = CutVector.make(
            cfg.n_branches, mode=cfg.cuts_mode, init=cfg.init, rng=rng, tau=cfg.tau
        )
        self.params["cuts.theta"] = self.cut_vector.theta.astype(self.dtype)

    def trainable_names(self) -> list[str]:
        names = [n for n in self.params if n != "cuts.theta"]
        if self.cfg.cuts_mode == "learnable":
            names.append("cuts.theta")
        return names

    def cuts(self) -> np.ndarray:
        cv = replace(self.cut_vector, theta=self.params["cuts.theta"].astype(np.float64))
        return cuts_from_theta(cv)

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture: dict | None = None,
    ) -> tuple[Node, dict[str, Node]]:
        x = _as_batch(x, self.cfg.backbone.patch_side, self.dtype)
        nodes = {name: graph.leaf(arr, name=name) for name, arr in self.params.items()}
        cv = replace(self.cut_vector, theta=self.params["cuts.theta"].astype(np.float64))
        branches, _ = branch_nodes(
            graph.constant(x, name="input"), nodes["cuts.theta"], cv,
            include_original=self.cfg.include_original,
        )
        feats = [
            _extractor_nodes(nodes, self.bn_states, f"branch{b}.", xb,
                             self.cfg.backbone, train, rng, capture)
            for b, xb in enumerate(branches)
        ]
        h = feats[0] if len(feats) == 1 else graph.concat(feats, axis=1)
        prob = _head_nodes(nodes, "head.", h, self.cfg.backbone.dense_widths, capture)
        return prob, nodes

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


Model = BackboneModel | LmlccModel


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float32) -> BackboneModel:
    return BackboneModel(cfg, seed=seed, dtype=dtype)


def build_lmlcc(cfg: LmlccConfig, seed: int = 0, dtype=np.float32) -> LmlccModel:
    return LmlccModel(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Config <-> flat key-value text (stored in checkpoints, read by the CLI).
# ---------------------------------------------------------------------------


def _ints(csv_field: str) -> tuple[int, ...]:
    return tuple(int(t) for t in csv_field.split("|")) if csv_field else ()


def config_to_text(model_kind: str, cfg: BackboneConfig | LmlccConfig) -> str:
    if model_kind == "backbone":
        backbone = cfg
        lines = [("mode", "backbone")]
    else:
        backbone = cfg.backbone
        lines = [
            ("mode", "lmlcc"),
            ("branches", str(cfg.n_branches)),
            ("include_original", "true" if cfg.include_original else "false"),
            ("cuts", cfg.cuts_mode),
            ("init", cfg.init),
            ("tau", f"{cfg.tau:g}"),
        ]
    lines += [
        ("scale", backbone.scale),
        ("patch_side", str(backbone.patch_side)),
        ("conv_channels", "|".join(str(c) for c in backbone.conv_channels)),
        ("pool_after", "|".join(str(c) for c in backbone.pool_after)),
        ("dropout_after", "|".join(str(c) for c in backbone.dropout_after)),
        ("dense_widths", "|".join(str(c) for c in backbone.dense_widths)),
    ]
    return "".join(f"{k} = {v}\n" for k, v in lines)


def config_from_text(text: str) -> tuple[str, BackboneConfig | LmlccConfig]:
    entries: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        entries[key] = value
    try:
        backbone = BackboneConfig(
            conv_channels=_ints(entries["conv_channels"]),
            pool_after=_ints(entries["pool_after"]),
            dropout_after=_ints(entries["dropout_after"]),
            dense_widths=_ints(entries["dense_widths"]),
            patch_side=int(entries["patch_side"]),
            scale=entries["scale"],
        )
        mode = entries["mode"]
        if mode == "backbone":
            return "backbone", backbone
        if mode != "lmlcc":
            raise ConfigError(f"unknown model mode {mode!r}")
        cfg = LmlccConfig(
            n_branches=int(entries["branches"]),
            include_original=entries["include_original"] == "true",
            cuts_mode=entries["cuts"],
            init=entries["init"],
            backbone=backbone,
            tau=float(entries.get("tau", str(DEFAULT_TAU))),
        )
        return "lmlcc", cfg
    except KeyError as exc:
        raise ConfigError(f"config missing key {exc.args[0]!r}") from None


def model_config_text(model: Model) -> str:
    return config_to_text(model.kind, model.cfg)


def model_from_config_text(text: str, seed: int = 0, dtype=np.float32) -> Model:
    kind, cfg = config_from_text(text)
    if kind == "backbone":
        return BackboneModel(cfg, seed=seed, dtype=dtype)
    return LmlccModel(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def _upsample_trilinear(vol: np.ndarray, side: int) -> np.ndarray:
    """Align-corners trilinear upsample of a cubic volume to side^3."""
    n = vol.shape[0]
    if n == side:
        return vol.copy()
    pos = np.linspace(0.0, n - 1.0, side) if n > 1 else np.zeros(side)
    lo = np.minimum(np.floor(pos).astype(np.intp), max(n - 2, 0))
    frac = pos - lo
    hi = np.minimum(lo + 1, n - 1)
    out = np.zeros((side, side, side), dtype=vol.dtype)
    for zi, wz in ((lo, 1 - frac), (hi, frac)):
        for yi, wy in ((lo, 1 - frac), (hi, frac)):
            for xi, wx in ((lo, 1 - frac), (hi, frac)):
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * vol[np.ix_(zi, yi, xi)]
    return out


def grad_cam(model: Model, patch: np.ndarray) -> np.ndarray:
    """Gradient-weighted activation heatmap over the patch voxels.

    Channel weights are the spatially averaged gradients of the output
    logit at the last conv feature maps (per branch); the weighted sums are
    rectified, upsampled to the patch grid, and max-normalized (an all-zero
    map is returned unchanged).
    """
    side = patch.shape[-1]
    capture: dict = {}
    prob, _ = model.forward(patch, train=False, capture=capture)
    logit = capture["logit"]
    graph.backward(logit)
    cam = None
    for feat in capture["features"]:
        act = feat.value[0]
        weights = feat.grad[0].mean(axis=(1, 2, 3))
        branch_cam = np.tensordot(weights, act, axes=1)
        cam = branch_cam if cam is None else cam + branch_cam
    cam = np.maximum(cam, 0.0)
    cam = _upsample_trilinear(cam, side)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam
