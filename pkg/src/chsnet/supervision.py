"""Cross-head supervision: deviation maps, top-delta masks, blended targets, the dual-head loss and its schedules.

Tensors are ``(B, 1, h, w)`` or ``(B, h, w)`` batches, or single ``(h, w)``
maps. Masks are always computed per image.
"""

from __future__ import annotations

import math
from fractions import Fraction
import warnings
from typing import NamedTuple

import torch

REDUCTIONS = ("mean", "sum")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def compute_deviation(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, gt, "compute_deviation")
    return (pred - gt).abs()


def mask_size(delta: float, n_cells: int) -> int:
    # delta is snapped to the nearest simple fraction first, since 0.29 * 100 == 28.999...
    return math.floor(Fraction(delta).limit_denominator(10**6) * n_cells)


def select_mask(dev: torch.Tensor, delta: float) -> torch.Tensor:
    """Mark the ``floor(delta * h * w)`` largest deviations of each map with 1.

    Equal values are taken in ascending row-major order, so the count is exact
    even when many cells tie.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    single = dev.dim() == 2
    flat = dev.reshape(1, -1) if single else dev.reshape(dev.shape[0], -1)
    k = mask_size(delta, flat.shape[1])
    mask = torch.zeros_like(flat)
    if k:
        # stable descending sort keeps lower indices first among ties
        order = torch.sort(flat.detach(), dim=1, descending=True, stable=True).indices
        mask.scatter_(1, order[:, :k], 1.0)
    return mask.reshape(dev.shape)


def refine_target(other_pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, alpha: float) -> torch.Tensor:
    """``alpha*M*other + (1 - alpha*M)*gt`` with the other head's prediction held constant."""
    _check_same_shape(other_pred, gt, "refine_target")
    _check_same_shape(mask, gt, "refine_target")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    am = alpha * mask
    return am * other_pred.detach() + (1.0 - am) * gt


def per_image_squared_error(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared error of each image in the batch, as a cell mean or a cell sum."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    sq = (pred - target).pow(2).reshape(pred.shape[0], -1)
    return sq.mean(dim=1) if reduction == "mean" else sq.sum(dim=1)


def squared_error(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Per-image squared error averaged over the batch."""
    return per_image_squared_error(pred, target, reduction).mean()


class CHSLoss(NamedTuple):
    loss: torch.Tensor
    conv_loss: torch.Tensor
    tran_loss: torch.Tensor
    conv_target: torch.Tensor
    tran_target: torch.Tensor
    conv_mask: torch.Tensor
    tran_mask: torch.Tensor
    per_image: torch.Tensor  # conv + tran term of each image, before the batch mean


def chs_loss(
    conv_pred: torch.Tensor,
    tran_pred: torch.Tensor,
    gt: torch.Tensor,
    delta: float,
    alpha: float,
    reduction: str = "mean",
) -> CHSLoss:
    """Dual-head loss with cross-head refined targets.

    Each head's mask comes from its own deviation from ``gt``; inside the mask
    its target is blended with the other head's (detached) prediction.
    """
    _check_same_shape(conv_pred, gt, "chs_loss")
    _check_same_shape(tran_pred, gt, "chs_loss")
    if gt.dim() == 2:
        conv_pred, tran_pred, gt = conv_pred[None], tran_pred[None], gt[None]
    gt = gt.detach()
    conv_mask = select_mask(compute_deviation(conv_pred.detach(), gt), delta)
    tran_mask = select_mask(compute_deviation(tran_pred.detach(), gt), delta)
    conv_target = refine_target(tran_pred, gt, conv_mask, alpha)
    tran_target = refine_target(conv_pred, gt, tran_mask, alpha)
    conv_terms = per_image_squared_error(conv_pred, conv_target, reduction)
    tran_terms = per_image_squared_error(tran_pred, tran_target, reduction)
    conv_loss, tran_loss = conv_terms.mean(), tran_terms.mean()
    return CHSLoss(conv_loss + tran_loss, conv_loss, tran_loss, conv_target, tran_target, conv_mask, tran_mask,
                   (conv_terms + tran_terms).detach())


def dual_mse_loss(conv_pred: torch.Tensor, tran_pred: torch.Tensor, gt: torch.Tensor, reduction: str = "mean"):
    """Plain supervision of both heads by ``gt``; the baseline without cross-head refinement."""
    if gt.dim() == 2:
        conv_pred, tran_pred, gt = conv_pred[None], tran_pred[None], gt[None]
    conv_loss = squared_error(conv_pred, gt, reduction)
    tran_loss = squared_error(tran_pred, gt, reduction)
    return conv_loss + tran_loss, conv_loss, tran_loss


def mask_overlap(a: torch.Tensor, b: torch.Tensor) -> float | None:
    """Mean per-image intersection-over-union of two binary masks; None when every mask is empty."""
    a = a.reshape(a.shape[0], -1) > 0.5
    b = b.reshape(b.shape[0], -1) > 0.5
    union = (a | b).sum(dim=1)
    valid = union > 0
    if not bool(valid.any()):
        return None
    inter = (a & b).sum(dim=1)
    return float((inter[valid].double() / union[valid].double()).mean())


class ScheduleState(NamedTuple):
    delta: float
    alpha: float


def schedule(i: int, T: int, delta_max: float, alpha_max: float) -> ScheduleState:
    """Linear ramp of (delta, alpha) from 0 at epoch 0 to their maxima at epoch ``T``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if i < 0:
        raise ValueError(f"epoch must be >= 0, got {i}")
    for name, v in (("delta_max", delta_max), ("alpha_max", alpha_max)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    if i >= T:
        if i > T:
            warnings.warn(f"epoch {i} past schedule end {T}; holding at maximum", stacklevel=2)
        return ScheduleState(float(delta_max), float(alpha_max))
    return ScheduleState(min(delta_max * i / T, delta_max), min(alpha_max * i / T, alpha_max))
