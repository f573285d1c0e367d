"""Losses, their prediction-space gradients, and validation metrics."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeMismatch
from ..protocol import LossKind, MetricKind

SOFT_DICE_SMOOTHING = 1e-5
_SIMPLEX_TOL = 1e-6


def _align(predictions: np.ndarray, targets: np.ndarray):
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape == targets.shape:
        return predictions, targets
    if (predictions.ndim == 2 and predictions.shape[1] == 1
            and targets.shape == (predictions.shape[0],)):
        return predictions, targets.reshape(-1, 1)
    if (predictions.ndim == 1 and targets.ndim == 2
            and targets.shape == (predictions.shape[0], 1)):
        return predictions, targets.reshape(-1)
    raise ShapeMismatch(
        f"predictions {predictions.shape} vs targets {targets.shape}")


def _as_rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(-1, 1)


def _check_cross_entropy_domain(predictions: np.ndarray):
    if predictions.ndim != 2:
        raise ShapeMismatch("cross_entropy needs [n, classes] predictions")
    if np.any(predictions < -_SIMPLEX_TOL) or np.any(predictions > 1 + _SIMPLEX_TOL):
        raise DomainError("cross_entropy probabilities outside [0, 1]")
    if np.any(np.abs(predictions.sum(axis=1) - 1.0) > 1e-4):
        raise DomainError("cross_entropy predictions must lie on the simplex")


def _check_unit_range(predictions: np.ndarray, what: str):
    if np.any(predictions < -_SIMPLEX_TOL) or np.any(predictions > 1 + _SIMPLEX_TOL):
        raise DomainError(f"{what} requires predictions in [0, 1]")


def _ce_targets(predictions: np.ndarray, targets) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != predictions.shape[0]:
        raise ShapeMismatch("cross_entropy targets must be [n] class indices")
    idx = targets.astype(np.int64)
    if np.any(np.abs(targets - idx) > 0):
        raise DomainError("cross_entropy targets must be integral class indices")
    if np.any(idx < 0) or np.any(idx >= predictions.shape[1]):
        raise DomainError("cross_entropy target class out of range")
    return idx


def loss(predictions, targets, loss_spec: LossKind) -> float:
    """Mean-over-batch scalar loss."""
    loss_spec = LossKind(loss_spec)
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.size == 0:
        raise ShapeMismatch("empty predictions")
    if loss_spec is LossKind.MSE:
        p, t = _align(predictions, targets)
        return float(np.mean((p - t) ** 2))
    if loss_spec is LossKind.CROSS_ENTROPY:
        _check_cross_entropy_domain(predictions)
        idx = _ce_targets(predictions, targets)
        picked = np.clip(predictions[np.arange(len(idx)), idx], 1e-300, None)
        return float(-np.mean(np.log(picked)))
    # soft dice
    p, t = _align(predictions, targets)
    _check_unit_range(p, "soft_dice")
    p2, t2 = _as_rows(p), _as_rows(t)
    inter = (p2 * t2).sum(axis=1)
    denom = p2.sum(axis=1) + t2.sum(axis=1) + SOFT_DICE_SMOOTHING
    dice = (2.0 * inter + SOFT_DICE_SMOOTHING) / denom
    return float(np.mean(1.0 - dice))


def loss_gradient(predictions, targets, loss_spec: LossKind) -> np.ndarray:
    """d(loss)/d(predictions), same shape as predictions."""
    loss_spec = LossKind(loss_spec)
    predictions = np.asarray(predictions, dtype=np.float64)
    if loss_spec is LossKind.MSE:
        p, t = _align(predictions, targets)
        return 2.0 * (p - t) / p.size
    if loss_spec is LossKind.CROSS_ENTROPY:
        _check_cross_entropy_domain(predictions)
        idx = _ce_targets(predictions, targets)
        grad = np.zeros_like(predictions)
        n = predictions.shape[0]
        picked = np.clip(predictions[np.arange(n), idx], 1e-300, None)
        grad[np.arange(n), idx] = -1.0 / (picked * n)
        return grad
    p, t = _align(predictions, targets)
    _check_unit_range(p, "soft_dice")
    p2, t2 = _as_rows(p), _as_rows(t)
    inter = (p2 * t2).sum(axis=1, keepdims=True)
    denom = p2.sum(axis=1, keepdims=True) + t2.sum(axis=1, keepdims=True) \
        + SOFT_DICE_SMOOTHING
    numer = 2.0 * inter + SOFT_DICE_SMOOTHING
    # d(1 - numer/denom)/dp = (numer - 2*t*denom) / denom^2, meaned over batch
    grad_rows = (numer - 2.0 * t2 * denom) / (denom ** 2)
    return (grad_rows / p2.shape[0]).reshape(p.shape)


def dice_score(prediction, truth) -> float:
    """Hard Dice overlap of two binary masks; 1.0 when both are empty."""
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ShapeMismatch(f"dice shapes {prediction.shape} vs {truth.shape}")
    for arr, what in ((prediction, "prediction"), (truth, "truth")):
        if not np.all(np.isin(arr, (0, 1))):
            raise DomainError(f"dice {what} must be binary")
    inter = int(np.sum((prediction == 1) & (truth == 1)))
    size = int(np.sum(prediction == 1)) + int(np.sum(truth == 1))
    if size == 0:
        return 1.0
    return 2.0 * inter / size


def metric_value(metric: MetricKind, predictions, targets) -> float:
    """Validation metric on holdout predictions."""
    metric = MetricKind(metric)
    predictions = np.asarray(predictions, dtype=np.float64)
    if metric is MetricKind.MSE:
        p, t = _align(predictions, targets)
        return float(np.mean((p - t) ** 2))
    if metric is MetricKind.ACCURACY:
        if predictions.ndim != 2:
            raise ShapeMismatch("accuracy needs [n, classes] predictions")
        idx = _ce_targets(predictions, targets)
        return float(np.mean(predictions.argmax(axis=1) == idx))
    p, t = _align(predictions, targets)
    hard = (p >= 0.5).astype(np.int8)
    t_bin = (np.asarray(t) >= 0.5).astype(np.int8)
    rows_p, rows_t = _as_rows(hard), _as_rows(t_bin)
    scores = [dice_score(rp, rt) for rp, rt in zip(rows_p, rows_t)]
    return float(np.mean(scores))
