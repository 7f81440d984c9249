"""
Module: services.losses_service
-------------------------------

Occupancy losses and metrics.

- occupancy_ce_loss: (optionally class-weighted) mean negative log-likelihood
  of the true label under the predicted distribution.
- lovasz_softmax_loss: Lovász extension of the Jaccard loss on softmax
  errors, averaged over the classes present in the ground truth.
- total_loss: the weighted training objective over all decoder branches plus
  the contrastive and consistency terms.
- miou / scene_iou: per-class IoU with their mean, and occupied-vs-free IoU.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app.schemas.config import LossWeights
from app.services.numeric import Tensor, as_tensor
from app.utils.errors import DataError, DimensionError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def _check_labels(pred: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape[1:] != gt.shape:
        raise DimensionError(f"prediction {pred.shape} does not match labels {gt.shape}")
    if gt.size and (gt.min() < 0 or gt.max() >= pred.shape[0]):
        raise DataError(f"labels must lie in [0, {pred.shape[0]}), got max {gt.max()}")
    return gt


def _onehot(gt: np.ndarray, L: int) -> np.ndarray:
    """(L, ...) indicator of the true class."""
    return np.moveaxis(np.eye(L)[gt], -1, 0)


def occupancy_ce_loss(pred, gt, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean NLL of ``gt`` under ``pred`` (L × H × W × Z distributions)."""
    pred = as_tensor(pred)
    gt = _check_labels(pred, gt)
    L = pred.shape[0]
    onehot = _onehot(gt, L)
    # clip without blocking the gradient of in-range probabilities
    floor = np.where(pred.data < PROB_FLOOR, PROB_FLOOR - pred.data, 0.0)
    nll = -((pred + floor).log() * onehot).sum(axis=0)
    if class_weights is None:
        return nll.mean()
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (L,):
        raise DimensionError(f"class_weights needs {L} entries, got {weights.shape}")
    cell_weights = weights[gt]
    return (nll * cell_weights).sum() * (1.0 / max(float(cell_weights.sum()), PROB_FLOOR))


def lovasz_grad(sorted_fg: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = sorted_fg.sum()
    intersection = gts - np.cumsum(sorted_fg)
    union = gts + np.cumsum(1.0 - sorted_fg)
    jaccard = 1.0 - intersection / union
    if sorted_fg.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(pred, gt) -> Tensor:
    """Lovász-softmax over the classes present in ``gt``."""
    pred = as_tensor(pred)
    gt = _check_labels(pred, gt)
    L = pred.shape[0]
    flat = pred.reshape(L, -1)
    labels = gt.reshape(-1)
    present = [c for c in range(L) if np.any(labels == c)]
    if not present:
        return Tensor(0.0)
    losses = []
    for c in present:
        fg = (labels == c).astype(np.float64)
        sign = np.where(fg > 0, 1.0, -1.0)
        # |fg - p| written with a constant sign so the gradient is exact
        errors = (fg - flat[c]) * sign
        order = np.argsort(-errors.data, kind="stable")
        losses.append((errors[order] * lovasz_grad(fg[order])).sum())
    return sum(losses) * (1.0 / len(present))


def total_loss(
    branch_losses: Sequence[Tuple[Tensor, Tensor]],
    L_cls,
    L_cons,
    weights: LossWeights,
) -> Tensor:
    """Σ_p (λ1·L_occ + λ2·L_Lov) + λ3·L_cls + λ4·L_cons."""
    if not branch_losses:
        raise DimensionError("total_loss needs at least one branch")
    total = Tensor(0.0)
    for occ, lov in branch_losses:
        total = total + weights.lambda1 * as_tensor(occ) + weights.lambda2 * as_tensor(lov)
    return total + weights.lambda3 * as_tensor(L_cls) + weights.lambda4 * as_tensor(L_cons)


# --------------------------
# Metrics
# --------------------------


def confusion_counts(
    pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union cell counts."""
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if pred_labels.shape != gt_labels.shape:
        raise DimensionError(f"label grids differ: {pred_labels.shape} vs {gt_labels.shape}")
    for name, labels in (("prediction", pred_labels), ("ground truth", gt_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"{name} labels must lie in [0, {num_classes})")
    classes = np.arange(num_classes)[:, None]
    p = pred_labels.reshape(1, -1) == classes
    g = gt_labels.reshape(1, -1) == classes
    return (p & g).sum(axis=1), (p | g).sum(axis=1)


def iou_from_counts(
    intersection: np.ndarray, union: np.ndarray, ignore_free: bool = True
) -> Tuple[np.ndarray, float]:
    per_class = np.full(len(union), np.nan)
    seen = union > 0
    per_class[seen] = intersection[seen] / union[seen]
    scored = per_class[1:] if ignore_free else per_class
    scored = scored[~np.isnan(scored)]
    return per_class, float(scored.mean()) if scored.size else float("nan")


def miou(
    pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int, ignore_free: bool = True
) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both) and their mean."""
    intersection, union = confusion_counts(pred_labels, gt_labels, num_classes)
    per_class, mean = iou_from_counts(intersection, union, ignore_free)
    if ignore_free:
        per_class[0] = np.nan
    return per_class, mean


def occupancy_counts(pred_labels: np.ndarray, gt_labels: np.ndarray) -> Tuple[int, int]:
    p = np.asarray(pred_labels) > 0
    g = np.asarray(gt_labels) > 0
    return int((p & g).sum()), int((p | g).sum())


def scene_iou(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """IoU of the occupied (non-free) cells; 1.0 when both grids are empty."""
    intersection, union = occupancy_counts(pred_labels, gt_labels)
    return intersection / union if union else 1.0
