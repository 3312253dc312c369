"""Mini-batch training with Adam, plateau learning-rate decay, per-epoch
logging, and best-validation checkpointing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffkit import graph
from .diffkit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .diffkit.loss import bce_loss, bce_value
from .diffkit.optim import AdamState, ReduceLROnPlateau, adam_step
from .errors import DataError, NumericalError
from .network import Model, model_config_text, model_from_config_text

EPOCH_LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 68
    lr_init: float = 1e-4
    lr_floor: float = 1e-6
    lr_factor: float = 0.5
    lr_patience: int = 10
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def _check_finite(loss_node: graph.Node) -> None:
    if np.all(np.isfinite(loss_node.value)):
        return
    culprit = graph.first_nonfinite(loss_node)
    name = culprit.name if culprit is not None and culprit.name else "loss"
    raise NumericalError(f"non-finite loss; first NaN/Inf tensor: '{name}'")


def _snapshot(model: Model) -> dict:
    return {
        "params": {k: v.copy() for k, v in model.params.items()},
        "bn": {k: (s.mean.copy(), s.var.copy()) for k, s in model.bn_states.items()},
    }


def _restore(model: Model, snap: dict) -> None:
    for k, v in snap["params"].items():
        model.params[k][...] = v
    for k, (mean, var) in snap["bn"].items():
        model.bn_states[k].mean[...] = mean
        model.bn_states[k].var[...] = var


def predict(model: Model, patches: np.ndarray, batch_size: int = 68) -> np.ndarray:
    """Eval-mode probabilities in [0, 1], deterministic."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[None]
    probs = []
    for lo in range(0, len(patches), batch_size):
        prob_node, _ = model.forward(patches[lo : lo + batch_size], train=False)
        probs.append(prob_node.value.reshape(-1))
    return np.concatenate(probs).astype(np.float64)


def train(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    tc: TrainConfig,
) -> TrainResult:
    """Minimize binary cross-entropy with Adam; returns the model rolled
    back to its best-validation-loss snapshot plus the per-epoch log."""
    train_x = np.asarray(train_x)
    train_y = np.asarray(train_y, dtype=np.float64).reshape(-1)
    val_x = np.asarray(val_x)
    val_y = np.asarray(val_y, dtype=np.float64).reshape(-1)
    if len(train_x) == 0 or len(val_x) == 0:
        raise DataError("training and validation sets must be non-empty")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise DataError("patch/label counts differ")

    rng = np.random.default_rng(tc.seed)
    optim = AdamState(lr=tc.lr_init)
    scheduler = ReduceLROnPlateau(factor=tc.lr_factor, patience=tc.lr_patience, floor=tc.lr_floor)
    trainable = model.trainable_names()

    result = TrainResult(model=model)
    best = _snapshot(model)
    stale = 0

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_x))
        epoch_lr = optim.lr
        loss_sum = 0.0
        correct = 0
        for lo in range(0, len(order), tc.batch_size):
            idx = order[lo : lo + tc.batch_size]
            xb = train_x[idx]
            yb = train_y[idx]
            prob, param_nodes = model.forward(xb, train=True, rng=rng)
            loss = bce_loss(prob, graph.constant(yb.reshape(-1, 1).astype(prob.value.dtype)))
            _check_finite(loss)
            graph.backward(loss)
            grads = {
                name: param_nodes[name].grad
                for name in trainable
                if param_nodes[name].grad is not None
            }
            adam_step(optim, {n: model.params[n] for n in grads}, grads)
            loss_sum += float(loss.value) * len(idx)
            correct += int(np.sum((prob.value.reshape(-1) >= 0.5) == (yb >= 0.5)))
        train_loss = loss_sum / len(order)
        train_acc = correct / len(order)

        val_probs = predict(model, val_x, batch_size=tc.batch_size)
        val_loss = bce_value(val_probs, val_y)
        val_acc = float(np.mean((val_probs >= 0.5) == (val_y >= 0.5)))

        result.log.append(
            EpochLog(epoch=epoch, lr=epoch_lr, train_loss=train_loss,
                     train_acc=train_acc, val_loss=val_loss, val_acc=val_acc)
        )

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best = _snapshot(model)
            stale = 0
        else:
            stale += 1
        scheduler.step(val_loss, optim)
        if tc.early_stop_patience is not None and stale > tc.early_stop_patience:
            break

    _restore(model, best)
    return result


def write_epoch_log(path: str | Path, log: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_COLUMNS)
        for row in log:
            writer.writerow(
                [row.epoch, f"{row.lr:.10g}", f"{row.train_loss:.8f}", f"{row.train_acc:.6f}",
                 f"{row.val_loss:.8f}", f"{row.val_acc:.6f}"]
            )


def model_to_checkpoint(model: Model) -> Checkpoint:
    aux = {}
    for name, state in model.bn_states.items():
        aux[f"{name}.mean"] = state.mean
        aux[f"{name}.var"] = state.var
    return Checkpoint(
        config_text=model_config_text(model),
        params=dict(model.params),
        aux=aux,
    )


def save_model(path: str | Path, model: Model) -> None:
    save_checkpoint(path, model_to_checkpoint(model))


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = model_from_config_text(ckpt.config_text)
    for name in model.params:
        if name not in ckpt.params:
            raise DataError(f"checkpoint missing parameter '{name}'")
        if ckpt.params[name].shape != model.params[name].shape:
            raise DataError(f"checkpoint parameter '{name}' has wrong shape")
        model.params[name] = ckpt.params[name].copy()
    for name, state in model.bn_states.items():
        state.mean = ckpt.aux[f"{name}.mean"].copy()
        state.var = ckpt.aux[f"{name}.var"].copy()
    return model


def load_model(path: str | Path) -> Model:
    return model_from_checkpoint(load_checkpoint(path))
