"""Ranking metrics and convergence bookkeeping."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, MetricError


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties 0.5).

    Computed by the rank-sum method with midranks, kept in integer
    arithmetic (doubled ranks) so the result is bitwise equal to brute-force
    pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(scores.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # doubled midranks: twice the average 1-based rank of each tie group
    doubled = np.empty(scores.size, dtype=np.int64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        doubled[i : j + 1] = (i + 1) + (j + 1)  # 2 * (first + last)/2
        i = j + 1
    doubled_pos = int(doubled[pos[order]].sum())
    numerator = doubled_pos - n_pos * (n_pos + 1)  # 2 * (rank sum - n_pos(n_pos+1)/2)
    return numerator / (2 * n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    """Quadratic pair-counting oracle for auc."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def epochs_to_threshold(history, threshold: float):
    """First 1-based epoch whose loss is <= threshold, or None."""
    for i, loss in enumerate(history, start=1):
        if loss <= threshold:
            return i
    return None
