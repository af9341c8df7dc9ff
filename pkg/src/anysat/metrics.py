"""Classification and segmentation metrics from exact integer counts."""

from __future__ import annotations

import numpy as np


class MetricsError(ValueError):
    pass


def confusion_matrix(pred, target, N: int) -> np.ndarray:
    """Counts ``C[t, p]`` of target class t predicted as p."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    target = np.asarray(target, dtype=np.int64).ravel()
    if pred.shape != target.shape:
        raise MetricsError(f"prediction shape {pred.shape} != label shape {target.shape}")
    if target.size == 0:
        raise MetricsError("empty label set")
    if pred.min() < 0 or target.min() < 0 or pred.max() >= N or target.max() >= N:
        raise MetricsError(f"class index outside [0, {N})")
    return np.bincount(target * N + pred, minlength=N * N).reshape(N, N)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def _summary(tp, fp, fn, support, accuracy: float) -> dict:
    f1 = _f1(tp, fp, fn)
    union = tp + fp + fn
    iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    seen = union > 0  # classes never labelled nor predicted carry no information
    total = support.sum()
    return {
        "overall_accuracy": float(accuracy),
        "weighted_f1": float((f1 * support).sum() / total) if total > 0 else 0.0,
        "macro_f1": float(f1[seen].mean()) if seen.any() else 0.0,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "per_class_f1": [float(v) for v in f1],
        "support": [int(s) for s in support],
        "miou": float(np.nanmean(iou)) if seen.any() else 0.0,
    }


def multiclass_metrics(pred, target, N: int) -> dict:
    """Metrics for single-label predictions (tile classes or pixel maps)."""
    cm = confusion_matrix(pred, target, N)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    out = _summary(tp, fp, fn, cm.sum(axis=1), tp.sum() / cm.sum())
    out["confusion"] = cm.tolist()
    return out


def multilabel_metrics(scores, target, threshold: float = 0.5) -> dict:
    """``scores`` are probabilities (n, N); ``target`` a 0/1 matrix (n, N)."""
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(target).astype(bool)
    if scores.shape != target.shape or scores.ndim != 2:
        raise MetricsError(f"expected matching (n, N) arrays, got {scores.shape} and {target.shape}")
    if target.shape[0] == 0:
        raise MetricsError("empty label set")
    pred = scores >= threshold
    tp = (pred & target).sum(axis=0)
    fp = (pred & ~target).sum(axis=0)
    fn = (~pred & target).sum(axis=0)
    return _summary(tp, fp, fn, target.sum(axis=0), (pred == target).mean())


def compute_metrics(pred, target, task: str, N: int, threshold: float = 0.5) -> dict:
    """Dispatch on ``task``: ``multilabel`` takes scores, the others class indices."""
    if task == "multilabel":
        return multilabel_metrics(pred, target, threshold)
    if task in ("multiclass", "segment", "changedet", "classify"):
        return multiclass_metrics(pred, target, N)
    raise MetricsError(f"unknown task {task!r}")
