"""Training losses: BCE + Dice structure loss, binary entropy, and the
confidence-weighted fine-tuning loss for pseudo-labeled data.

All functions take and return tensors so gradients flow; numpy arrays are
accepted and treated as constants.  Binary entropy is base 2 so that both
the uncertainty map and the confidence map live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, as_tensor, clip, log, tmean, tsum)

CLIP_EPS = 1.0e-7
_LOG2 = float(np.log(2.0))
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossValue:
    total: float
    bce: float = 0.0
    dice: float = 0.0
    entropy: float = 0.0
    weighted_structure: float = 0.0


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def _bce_pixelwise(pred: Tensor, target: Tensor) -> Tensor:
    p = clip(pred, CLIP_EPS, 1.0 - CLIP_EPS)
    return -(target * log(p) + (1.0 - target) * log(1.0 - p))


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy; predictions clipped away from {0,1}."""
    pred, target = _pair(pred, target)
    return tmean(_bce_pixelwise(pred, target))


def dice_loss(pred, target) -> Tensor:
    """Soft Dice loss with smoothing 1 (empty-vs-empty gives 0)."""
    pred, target = _pair(pred, target)
    inter = tsum(pred * target)
    denom = tsum(pred) + tsum(target) + DICE_SMOOTH
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / denom


def structure_loss(pred, target) -> Tensor:
    """BCE + Dice with unit weights."""
    pred, target = _pair(pred, target)
    return bce(pred, target) + dice_loss(pred, target)


def structure_loss_batch(pred, target) -> Tensor:
    """Mean over batch items of per-item structure loss ([B,1,H,W])."""
    pred, target = _pair(pred, target)
    if pred.ndim != 4:
        raise ShapeError("batch loss expects [B,1,H,W]")
    b = pred.shape[0]
    total = bce(pred, target)
    inter = tsum(pred * target, axis=(1, 2, 3))
    psum = tsum(pred, axis=(1, 2, 3))
    tsum_ = tsum(target, axis=(1, 2, 3))
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + tsum_ + DICE_SMOOTH)
    return total + tsum(dice) * (1.0 / b)


def entropy_map(pred) -> Tensor:
    """Per-pixel binary entropy, base 2; range [0, 1]."""
    pred = as_tensor(pred)
    p = clip(pred, CLIP_EPS, 1.0 - CLIP_EPS)
    h = -(p * log(p) + (1.0 - p) * log(1.0 - p))
    return h * (1.0 / _LOG2)


def phase2_loss(pred, pseudo_target, confidence, lambda_us: float = 1.0,
                lambda_ue: float = 1.0, entropy_on_pseudo: bool = False
                ) -> tuple[Tensor, LossValue]:
    """Confidence-weighted structure loss plus an entropy penalty.

    BCE is weighted per pixel by the confidence map before averaging; Dice
    runs on confidence-masked maps (p*C, t*C).  The entropy term defaults to
    the current prediction so it actually sharpens the model; a switch
    restores the fixed-pseudo-label reading (a constant w.r.t. the model).
    Supports [1,H,W] single items and [B,1,H,W] batches.
    """
    pred, target = _pair(pred, pseudo_target)
    conf = as_tensor(confidence)
    if conf.shape != pred.shape:
        raise ShapeError(f"confidence shape {conf.shape} != {pred.shape}")
    cdat = conf.data
    if np.any(cdat < 0.0) or np.any(cdat > 1.0):
        raise ValueError("confidence values must lie in [0, 1]")

    bce_term = tmean(conf * _bce_pixelwise(pred, target))
    pc, tc = pred * conf, target * conf
    if pred.ndim == 4:
        b = pred.shape[0]
        inter = tsum(pc * tc, axis=(1, 2, 3))
        denom = (tsum(pc, axis=(1, 2, 3)) + tsum(tc, axis=(1, 2, 3))
                 + DICE_SMOOTH)
        dice_term = tsum(1.0 - (2.0 * inter + DICE_SMOOTH) / denom) * (1.0 / b)
    else:
        dice_term = dice_loss(pc, tc)
    ent_src = target if entropy_on_pseudo else pred
    ent_term = tmean(entropy_map(ent_src))

    weighted = bce_term + dice_term
    total = lambda_us * weighted + lambda_ue * ent_term
    value = LossValue(
        total=total.item(),
        bce=bce_term.item(),
        dice=dice_term.item(),
        entropy=ent_term.item(),
        weighted_structure=weighted.item(),
    )
    return total, value
