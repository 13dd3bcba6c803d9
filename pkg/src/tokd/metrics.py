"""Frame-level binary metrics: accuracy, ROC AUC, EER, gradient cosine."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, NumericError


def _check(scores, labels, need_both=True):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape or scores.size == 0:
        raise DataError(f"need matching non-empty scores/labels, got {scores.shape} and {labels.shape}")
    if need_both and (labels.min() == labels.max()):
        raise DataError("metric needs both classes present")
    return scores, labels


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of samples with ``(score >= threshold) == label``; ties go to class 1."""
    scores, labels = _check(scores, labels, need_both=False)
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + P(pos == neg) / 2, via average ranks."""
    scores, labels = _check(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every unique score threshold (``score >= t`` is positive), from t=+inf down."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    return fpr, tpr


def eer(scores, labels) -> float:
    """Equal error rate: the FPR where FPR == FNR on the piecewise-linear ROC curve."""
    fpr, tpr = roc_points(scores, labels)
    diff = fpr - (1.0 - tpr)  # starts at -1, ends at +1
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(fpr[i])
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def grad_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start); NaNs are ignored."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        chunk = v[max(0, i - window + 1):i + 1]
        chunk = chunk[np.isfinite(chunk)]
        out[i] = chunk.mean() if chunk.size else np.nan
    return out
