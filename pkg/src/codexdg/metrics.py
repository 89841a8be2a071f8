"""Segmentation and classification metrics over hard predictions."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, ParameterError

METRIC_KINDS = ("oa", "miou", "avg_acc")


def _pair(preds, labels):
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise DimensionError(f"preds shape {p.shape} does not match labels shape {y.shape}")
    if p.size == 0:
        raise DimensionError("metrics need at least one position")
    return p.ravel().astype(np.int64), y.ravel().astype(np.int64)


def confusion_matrix(preds, labels, K: int) -> np.ndarray:
    """``C[i, j]`` counts positions with label ``i`` predicted as ``j``."""
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    p, y = _pair(preds, labels)
    if p.min() < 0 or y.min() < 0 or p.max() >= K or y.max() >= K:
        raise ParameterError(f"class indices must lie in [0, {K})")
    return np.bincount(y * K + p, minlength=K * K).reshape(K, K)


def metric_oa(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def _miou_from_confusion(cm: np.ndarray) -> float:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    return float(np.mean(tp[present] / union[present]))


def metric_miou(preds, labels, K: int) -> float:
    """Mean IoU over classes that appear in either labels or predictions."""
    return _miou_from_confusion(confusion_matrix(preds, labels, K))


def metric_avg_acc(preds, labels, K: int) -> float:
    """Mean per-class recall over classes present in the labels."""
    cm = confusion_matrix(preds, labels, K)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def per_sample_iou(preds, labels, K: int) -> np.ndarray:
    """mIoU of each sample's own confusion matrix; leading axis indexes samples."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise DimensionError(f"preds shape {p.shape} does not match labels shape {y.shape}")
    return np.array([metric_miou(p[i], y[i], K) for i in range(p.shape[0])])


def compute_metric(kind: str, preds, labels, K: int) -> float:
    if kind == "oa":
        return metric_oa(preds, labels)
    if kind == "miou":
        return metric_miou(preds, labels, K)
    if kind == "avg_acc":
        return metric_avg_acc(preds, labels, K)
    raise ParameterError(f"unknown metric kind {kind!r}; expected one of {METRIC_KINDS}")
