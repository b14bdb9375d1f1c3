"""Hand-rolled networks, optimizer, checkpointing, gradient checks."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, l1_loss, loss_and_grad
from .models import (
    ArchConfig,
    BackboneNet,
    DenoiserNet,
    PerceptionNet,
    RefineNets,
    time_embed,
)
from .optim import AdamW

__all__ = [
    "AdamW",
    "ArchConfig",
    "BackboneNet",
    "CheckpointError",
    "DenoiserNet",
    "PerceptionNet",
    "RefineNets",
    "grad_check",
    "l1_loss",
    "load_checkpoint",
    "loss_and_grad",
    "save_checkpoint",
    "time_embed",
]
