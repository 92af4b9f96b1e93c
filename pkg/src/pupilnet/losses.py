"""Soft Dice, L1 on normalized ellipse parameters, and their unweighted sum.

Functions accept torch tensors (differentiable) or numpy arrays (returned as
floats). Masks with more than two dimensions are treated as batches: the
leading axis indexes samples and every reported value is a batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch

SMOOTH = 1e-7


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _out(value: torch.Tensor, *inputs):
    return float(value) if not any(isinstance(x, torch.Tensor) for x in inputs) else value


def _per_sample_dice(pred: torch.Tensor, gt: torch.Tensor, smooth: float) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    gt = gt.to(pred.dtype)
    if pred.ndim <= 2:
        dims = tuple(range(pred.ndim))
    else:
        dims = tuple(range(1, pred.ndim))
    inter = (pred * gt).sum(dim=dims)
    total = pred.sum(dim=dims) + gt.sum(dim=dims)
    return (2 * inter + smooth) / (total + smooth)


def dice_score(pred, gt, smooth: float = SMOOTH):
    """Soft DSC ``(2 sum(p g) + s) / (sum p + sum g + s)``; batch mean for batched input."""
    d = _per_sample_dice(_tensor(pred), _tensor(gt), smooth).mean()
    return _out(d, pred, gt)


def dice_loss(pred, gt, smooth: float = SMOOTH):
    d = 1 - _per_sample_dice(_tensor(pred), _tensor(gt), smooth).mean()
    return _out(d, pred, gt)


def l1_params(pred, gt):
    """Sum of absolute differences over the five parameters (batch mean for N x 5)."""
    p, g = _tensor(pred), _tensor(gt)
    if p.shape != g.shape or p.shape[-1] != 5:
        raise ShapeMismatch(f"parameter shapes {tuple(p.shape)} and {tuple(g.shape)} must match (..., 5)")
    value = (p - g.to(p.dtype)).abs().sum(dim=-1).mean()
    return _out(value, pred, gt)


@dataclass
class LossValue:
    total: torch.Tensor
    dice_component: torch.Tensor
    l1_component: torch.Tensor

    def item(self) -> dict:
        return {
            "total": float(self.total),
            "dice": float(self.dice_component),
            "l1": float(self.l1_component),
        }


def combined_loss(pred_mask, gt_mask, pred_params=None, gt_params=None, l1_weight: float = 1.0) -> LossValue:
    """Dice loss plus L1 on ellipse parameters. Without parameters it reduces to the Dice loss."""
    dice = 1 - _per_sample_dice(_tensor(pred_mask), _tensor(gt_mask), SMOOTH).mean()
    if pred_params is None:
        l1 = torch.zeros((), dtype=dice.dtype, device=dice.device)
    else:
        l1 = l1_weight * l1_params(_tensor(pred_params), _tensor(gt_params))
    return LossValue(dice + l1, dice, l1)
