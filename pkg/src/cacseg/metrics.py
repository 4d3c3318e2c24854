"""Segmentation metrics."""

from __future__ import annotations

import numpy as np

from .labels import IGNORE


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class t predicted as p; IGNORE pixels are dropped."""
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != IGNORE
    idx = labels[keep] * n_classes + pred[keep]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    iou = np.full(len(inter), np.nan)
    defined = union > 0
    iou[defined] = inter[defined] / union[defined]
    miou = float(iou[defined].mean()) if defined.any() else float("nan")
    return iou, miou


def mean_iou(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[np.ndarray, float]:
    return iou_from_confusion(confusion_matrix(pred, labels, n_classes))
