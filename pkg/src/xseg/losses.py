"""Training losses: smoothed overlap (Dice) loss, a Sobel boundary loss,
and their weighted combination, each with an analytic gradient with respect
to the prediction."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError

SMOOTHING = 1.0
DICE_WEIGHT = 0.9
BOUNDARY_WEIGHT = 0.1


def _same_dims(y_true: np.ndarray, y_pred: np.ndarray) -> None:
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"mask shapes differ: {y_true.shape} vs {y_pred.shape}")


def dice_score(y_true: np.ndarray, y_pred: np.ndarray, eps: float = SMOOTHING) -> float:
    """(2*sum(t*p) + eps) / (sum(t) + sum(p) + eps).

    Works on soft or binary masks of any matching shape; the soft
    intersection is the elementwise product. With both masks empty the
    smoothing term yields 1.0.
    """
    _same_dims(y_true, y_pred)
    inter = float((y_true * y_pred).sum(dtype=np.float64))
    total = float(y_true.sum(dtype=np.float64)) + float(y_pred.sum(dtype=np.float64))
    return (2.0 * inter + eps) / (total + eps)


def dice_loss(y_true: np.ndarray, y_pred: np.ndarray, eps: float = SMOOTHING) -> float:
    return 1.0 - dice_score(y_true, y_pred, eps)


def dice_loss_grad(y_true: np.ndarray, y_pred: np.ndarray, eps: float = SMOOTHING):
    """Returns (loss, d loss / d y_pred)."""
    _same_dims(y_true, y_pred)
    inter = float((y_true * y_pred).sum(dtype=np.float64))
    total = float(y_true.sum(dtype=np.float64)) + float(y_pred.sum(dtype=np.float64))
    num = 2.0 * inter + eps
    den = total + eps
    loss = 1.0 - num / den
    grad = ((num - 2.0 * y_true * den) / (den * den)).astype(y_pred.dtype)
    return loss, grad


def boundary_loss(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean absolute difference of the Sobel gradient magnitudes.

    Sensitive only to edges: two constant maps always compare to 0.
    """
    _same_dims(y_true, y_pred)
    mt = ops.sobel_gradient_magnitude(y_true)
    mp = ops.sobel_gradient_magnitude(y_pred)
    return float(np.abs(mt - mp).mean(dtype=np.float64))


def boundary_loss_grad(y_true: np.ndarray, y_pred: np.ndarray):
    _same_dims(y_true, y_pred)
    mt = ops.sobel_gradient_magnitude(y_true)
    mp = ops.sobel_gradient_magnitude(y_pred)
    diff = mt - mp
    loss = float(np.abs(diff).mean(dtype=np.float64))
    grad_mp = (-np.sign(diff) / diff.size).astype(y_pred.dtype)
    return loss, ops.sobel_backward(y_pred, grad_mp)


def combined_loss(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    dice_weight: float = DICE_WEIGHT,
    boundary_weight: float = BOUNDARY_WEIGHT,
) -> float:
    return dice_weight * dice_loss(y_true, y_pred) + boundary_weight * boundary_loss(y_true, y_pred)


def combined_loss_grad(
    y_true: np.ndarray,
    y_pred: np.ndarray,
    dice_weight: float = DICE_WEIGHT,
    boundary_weight: float = BOUNDARY_WEIGHT,
):
    """Returns (loss, gradient) of the weighted Dice + boundary loss."""
    dl, dg = dice_loss_grad(y_true, y_pred)
    bl, bg = boundary_loss_grad(y_true, y_pred)
    loss = dice_weight * dl + boundary_weight * bl
    grad = dice_weight * dg + boundary_weight * bg
    return loss, grad
