"""Training objective: softmax Dice, attention MSE, inter-class term and their schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import Variable
from .sam import attention_supervision_loss, inter_class_loss
from .tensor import ShapeError

__all__ = [
    "softmax_dice_loss",
    "attention_supervision_loss",
    "inter_class_loss",
    "LossBundle",
    "schedule_total",
]

DICE_EPS = 1e-5


def softmax_dice_loss(pred, target, eps: float = DICE_EPS, foreground_only: bool = True) -> Variable:
    """``1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)`` over foreground channels.

    ``pred`` must already be a softmax over axis 1; sums run over the batch
    and all spatial axes of each channel.
    """
    pred = pred if isinstance(pred, Variable) else Variable(pred)
    target = np.asarray(target.value if isinstance(target, Variable) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"dice loss: prediction {pred.shape} vs target {target.shape}")
    axes = tuple(i for i in range(pred.value.ndim) if i != 1)
    channels = list(range(1, pred.shape[1])) if foreground_only else list(range(pred.shape[1]))
    p = F.take(pred, channels, axis=1)
    g = target[:, channels]
    inter = F.sum(F.mul(p, g), axes=axes)
    denom = F.add(F.sum(p, axes=axes), g.sum(axis=axes))
    dice = F.div(F.add_scalar(F.scale(inter, 2.0), eps), F.add_scalar(denom, eps))
    return F.add_scalar(F.neg(F.mean(dice)), 1.0)


@dataclass
class LossBundle:
    """Loss components for one step, plus the weights and the epoch."""

    main: Variable
    attention: Variable | None = None
    inter: Variable | None = None
    epoch: int = 0
    w_main: float = 1.0
    w_attention: float = 1.0
    w_inter: float = 0.1
    switch_epoch: int = 20

    def inter_active(self) -> bool:
        return self.inter is not None and self.epoch >= self.switch_epoch


def schedule_total(bundle: LossBundle) -> Variable:
    """Weighted sum of the active losses.

    Before ``switch_epoch`` only the main and attention losses count; from
    ``switch_epoch`` on the inter-class term joins.
    """
    total = F.scale(bundle.main, bundle.w_main)
    if bundle.attention is not None:
        total = F.add(total, F.scale(bundle.attention, bundle.w_attention))
    if bundle.inter_active():
        total = F.add(total, F.scale(bundle.inter, bundle.w_inter))
    return total
