"""Minimal reverse-mode differentiation core plus the neural-network layers,
loss, optimizer, gradient checker, and checkpoint format used by the models.
"""

from .graph import Node, backward, leaf, constant, topo_order
from .layers import (
    BnState,
    batchnorm,
    batchnorm_forward,
    conv3d,
    conv3d_forward,
    dense,
    dropout,
    maxpool3d,
    maxpool3d_forward,
)
from .loss import bce_loss, bce_value
from .optim import AdamState, ReduceLROnPlateau, adam_step
from .gradcheck import grad_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Node",
    "backward",
    "leaf",
    "constant",
    "topo_order",
    "BnState",
    "batchnorm",
    "batchnorm_forward",
    "conv3d",
    "conv3d_forward",
    "dense",
    "dropout",
    "maxpool3d",
    "maxpool3d_forward",
    "bce_loss",
    "bce_value",
    "AdamState",
    "ReduceLROnPlateau",
    "adam_step",
    "grad_check",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]
