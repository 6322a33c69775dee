"""Segmentation losses, differentiable through the tensor graph.

Stage 1 trains on class-weighted cross entropy over softmax probabilities;
stage 2 on the exact mean of soft Dice and soft Jaccard losses.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, log

__all__ = ["weighted_cross_entropy", "dice_loss", "jaccard_loss", "composite_loss",
           "EPS"]

EPS = 1e-6
_LOG_GUARD = 1e-12


def weighted_cross_entropy(probs: Tensor, targets: np.ndarray,
                           weights: np.ndarray) -> Tensor:
    """-(1/Npix) * sum over pixels of weights[t] * log(p_t + 1e-12).

    ``probs`` is [N, C, H, W] post-softmax, ``targets`` integer [N, H, W],
    ``weights`` length C. Pixel-count normalized (not weight-normalized).
    """
    n, c, h, w = probs.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ValueError(f"targets shape {targets.shape} != {(n, h, w)}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise ValueError(f"target label {int(targets.max())} outside 0..{c - 1}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ValueError(f"weights shape {weights.shape} != ({c},)")
    onehot = targets[:, None, :, :] == np.arange(c).reshape(1, c, 1, 1)
    wmap = (onehot * weights.reshape(1, c, 1, 1)).astype(probs.data.dtype)
    npix = n * h * w
    picked = log(probs + _LOG_GUARD) * wmap
    return picked.sum() * (-1.0 / npix)


def _overlap_terms(pred: Tensor, target: np.ndarray):
    target = np.asarray(target)
    if target.shape != pred.data.shape:
        raise ValueError(f"target shape {target.shape} != pred {pred.data.shape}")
    vals = np.unique(target)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"target must be binary, found values {vals[:8]}")
    y = target.astype(pred.data.dtype)
    inter = (pred * y).sum()
    sp = pred.sum()
    sy = float(y.sum())
    return inter, sp, sy


def dice_loss(pred: Tensor, target: np.ndarray, eps: float = EPS) -> Tensor:
    """1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)."""
    inter, sp, sy = _overlap_terms(pred, target)
    return 1.0 - (2.0 * inter + eps) / (sp + sy + eps)


def jaccard_loss(pred: Tensor, target: np.ndarray, eps: float = EPS) -> Tensor:
    """1 - (sum(p*y) + eps) / (sum(p + y - p*y) + eps)."""
    inter, sp, sy = _overlap_terms(pred, target)
    union = sp + sy - inter
    return 1.0 - (inter + eps) / (union + eps)


def composite_loss(pred: Tensor, target: np.ndarray, eps: float = EPS) -> Tensor:
    """Exact mean of the Dice and Jaccard losses."""
    return (dice_loss(pred, target, eps) + jaccard_loss(pred, target, eps)) * 0.5
