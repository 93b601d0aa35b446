"""Dense-prediction evaluation metrics."""

from __future__ import annotations

from typing import Tuple

import numpy as np


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes present in prediction or ground truth.

    Classes absent from both maps do not enter the mean.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty maps")
    if gt.max() >= num_classes or pred.max() >= num_classes:
        raise ValueError("class index out of range")
    ious = []
    for cls in range(num_classes):
        p = pred == cls
        g = gt == cls
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious))


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty maps")
    return float(np.mean(pred == gt))


def depth_errors(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray
) -> Tuple[float, float]:
    """(mean absolute error, mean relative error) over the valid mask."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError("shape mismatch between prediction, truth and mask")
    if not mask.any():
        raise ValueError("empty validity mask")
    if np.any(gt[mask] <= 0):
        raise ValueError("ground-truth depth must be positive on the mask")
    diff = np.abs(pred[mask] - gt[mask])
    return float(diff.mean()), float((diff / gt[mask]).mean())
