"""AUROC / AUPRC / accuracy with macro averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    auroc: float | None
    auprc: float | None
    accuracy: float


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float | None:
    """Rank-statistic AUROC (ties get half credit); ``None`` if only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float | None:
    """Average precision: step integration of precision over recall at distinct thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _macro(fn, scores: np.ndarray, onehot: np.ndarray) -> float | None:
    vals = [fn(scores[:, c], onehot[:, c]) for c in range(onehot.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def compute_metrics(probs: np.ndarray, labels: np.ndarray, objective: str) -> Metrics:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if objective == "binary":
        p = probs.reshape(-1)
        return Metrics(auroc(p, labels), auprc(p, labels), float(np.mean((p >= 0.5) == labels.astype(bool))))
    if objective == "multiclass":
        onehot = np.eye(probs.shape[1], dtype=np.int64)[labels.astype(np.int64)]
        acc = float(np.mean(np.argmax(probs, axis=1) == labels))
        return Metrics(_macro(auroc, probs, onehot), _macro(auprc, probs, onehot), acc)
    if objective == "multilabel":
        acc = float(np.mean((probs >= 0.5) == labels.astype(bool)))
        return Metrics(_macro(auroc, probs, labels), _macro(auprc, probs, labels), acc)
    raise ValueError(f"unknown objective {objective!r}")
