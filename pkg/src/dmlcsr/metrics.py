"""Confusion-matrix segmentation metrics: per-class F1, mean/overall F1, mIoU.

Rows of a confusion matrix index ground truth, columns index prediction.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Return ``cm`` plus the counts of (truth, pred) pixel pairs."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    n = cm.shape[0]
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} values outside [0, {n})")
    idx = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return cm + np.bincount(idx, minlength=n * n).reshape(n, n)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    return accumulate(new_confusion(num_classes), pred, truth)


def _counts(cm: np.ndarray):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def absent_classes(cm: np.ndarray) -> np.ndarray:
    """Classes with neither ground-truth support nor predictions."""
    cm = np.asarray(cm)
    return (cm.sum(axis=0) == 0) & (cm.sum(axis=1) == 0)


def per_class_f1(cm: np.ndarray, return_absent: bool = False):
    """F1 = 2TP / (2TP + FP + FN); absent classes score 1.0.

    With ``return_absent`` the boolean mask of absent classes is returned too.
    """
    tp, fp, fn = _counts(cm)
    denom = 2 * tp + fp + fn
    absent = denom == 0
    f1 = np.where(absent, 1.0, 2 * tp / np.where(absent, 1.0, denom))
    return (f1, absent) if return_absent else f1


def mean_f1(cm: np.ndarray) -> float:
    """Mean per-class F1 over the foreground classes 1..C-1."""
    return float(per_class_f1(cm)[1:].mean())


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class, NaN for absent classes."""
    tp, fp, fn = _counts(cm)
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom == 0, np.nan, tp / denom)


def mean_iou(cm: np.ndarray, include_background: bool = False) -> float:
    """Mean IoU over present classes. Background is left out by default so the
    class set matches :func:`mean_f1`."""
    iou = per_class_iou(cm)
    if not include_background:
        iou = iou[1:]
    iou = iou[~np.isnan(iou)]
    return float(iou.mean()) if iou.size else 1.0


def check_groups(groups: Iterable[Sequence[int]], num_classes: int) -> list[tuple[int, ...]]:
    seen: set[int] = set()
    out = []
    for g in groups:
        g = tuple(int(c) for c in g)
        if not g:
            raise ValueError("empty class group")
        for c in g:
            if not 1 <= c < num_classes:
                raise ValueError(f"group member {c} is not a foreground class")
            if c in seen:
                raise ValueError(f"class {c} appears in more than one group")
            seen.add(c)
        out.append(g)
    return out


def overall_f1(cm: np.ndarray, groups: Iterable[Sequence[int]]) -> float:
    """Micro F1 after merging each group of classes into one component."""
    cm = np.asarray(cm, dtype=np.float64)
    groups = check_groups(groups, cm.shape[0])
    tp = fp = fn = 0.0
    for g in groups:
        idx = list(g)
        inside = cm[np.ix_(idx, idx)].sum()
        tp += inside
        fp += cm[:, idx].sum() - inside
        fn += cm[idx, :].sum() - inside
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else float(2 * tp / denom)


def summarize(cm: np.ndarray, groups: Iterable[Sequence[int]] | None = None,
              class_names: Sequence[str] | None = None) -> dict:
    """All metrics as a JSON-friendly dict."""
    f1, absent = per_class_f1(cm, return_absent=True)
    iou = per_class_iou(cm)
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(f1))]
    out = {
        "mean_f1": mean_f1(cm),
        "miou": mean_iou(cm),
        "per_class": [
            {"class": names[j], "f1": float(f1[j]),
             "iou": None if np.isnan(iou[j]) else float(iou[j]), "absent": bool(absent[j])}
            for j in range(len(f1))
        ],
    }
    if groups is not None:
        out["overall_f1"] = overall_f1(cm, groups)
    return out
