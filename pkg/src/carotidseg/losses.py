"""Training objectives for the 3D network and the 2D prompt segmenter."""
from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
PROMPT_LOSS_WEIGHTS = (20.0, 1.0, 1.0)  # focal : dice : iou-regression


def soft_dice_loss(probs, onehot, eps: float = DICE_EPS):
    """1 - mean over classes of (2*sum(p*q) + eps) / (sum(p) + sum(q) + eps).

    Sums run over batch and space. The eps in the numerator makes a class
    that is absent from both prediction and target score 1 rather than 0.
    """
    dims = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def seg_loss(logits, target, w_ce: float = 1.0, w_dice: float = 1.0, return_components: bool = False):
    """Weighted cross-entropy + soft Dice over all classes.

    ``logits``: (B, K, D, H, W); ``target``: (B, D, H, W) integer classes.
    """
    target = target.long()
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).movedim(-1, 1).to(probs.dtype)
    dice = soft_dice_loss(probs, onehot)
    total = w_ce * ce + w_dice * dice
    if return_components:
        return total, {"ce": float(ce.detach()), "dice": float(dice.detach())}
    return total


def focal_loss(logits, target, gamma: float = 2.0):
    """Binary focal loss, mean over pixels; equals BCE at gamma=0."""
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    if gamma == 0:
        return bce.mean()
    p_t = torch.exp(-bce)
    return ((1.0 - p_t) ** gamma * bce).mean()


def binary_iou(logits, target):
    """Hard IoU of ``logits > 0`` against ``target`` per sample; 1 when both empty."""
    pred = (logits > 0).flatten(1)
    tgt = target.bool().flatten(1)
    inter = (pred & tgt).sum(1).to(logits.dtype)
    union = (pred | tgt).sum(1).to(logits.dtype)
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def prompt_loss(logits, target, iou_pred, gamma: float = 2.0, weights=PROMPT_LOSS_WEIGHTS,
                return_components: bool = False):
    """20 * focal + 1 * soft Dice + 1 * (predicted IoU - actual IoU)^2.

    ``logits``/``target``: (B, 1, H, W); ``iou_pred``: (B,).
    """
    w_focal, w_dice, w_iou = weights
    target = target.to(logits.dtype)
    focal = focal_loss(logits, target, gamma)
    probs = torch.sigmoid(logits)
    dice = soft_dice_loss(probs, target)
    actual = binary_iou(logits.detach(), target)
    iou = F.mse_loss(iou_pred.reshape(-1), actual)
    total = w_focal * focal + w_dice * dice + w_iou * iou
    if return_components:
        return total, {"focal": float(focal.detach()), "dice": float(dice.detach()),
                       "iou": float(iou.detach())}
    return total
