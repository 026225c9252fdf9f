"""Site-level evaluation metrics.

All metrics are pure functions of numpy arrays and agree with brute-force
pair-counting oracles (see the test suite).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .._kernels import cindex_counts as _cindex_counts

__all__ = ["auroc", "balanced_accuracy", "brier", "c_index", "BalancedAccuracy"]


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties 1/2.

    Computed from the rank-sum identity with average ranks, which equals the
    pairwise definition exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: both classes must be present")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


class BalancedAccuracy(NamedTuple):
    value: float
    sensitivity: float
    specificity: float


def balanced_accuracy(preds, labels) -> BalancedAccuracy:
    """(sensitivity + specificity) / 2 for hard 0/1 predictions."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("balanced accuracy undefined: both classes must be present")
    sens = float(((preds == 1) & (labels == 1)).sum()) / n_pos
    spec = float(((preds == 0) & (labels == 0)).sum()) / n_neg
    return BalancedAccuracy((sens + spec) / 2.0, sens, spec)


def c_index(risk, times, events) -> float:
    """Fraction of comparable subject pairs ordered correctly by risk.

    A pair is comparable when one subject has an event strictly before the
    other subject's time; tied risks count 1/2.
    """
    risk = np.ascontiguousarray(risk, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    events = np.ascontiguousarray(events, dtype=np.int64)
    conc, tied, comparable = _cindex_counts(risk, times, events)
    if comparable == 0:
        raise ValueError("concordance undefined: no comparable pairs")
    return (conc + 0.5 * tied) / comparable


def brier(probabilities, labels) -> float:
    """Mean squared error of predicted positive-class probabilities."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))
