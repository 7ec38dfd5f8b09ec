"""Ranking metrics: AUC, impression-weighted per-user AUC, and log loss.

``auc`` is the O(n log n) rank-sum form; ``auc_pairwise`` is the O(n^2)
pairwise probability kept as an independent cross-check. Ties earn half
credit in both.
"""

from __future__ import annotations

import numpy as np


def _check_binary(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return labels.astype(np.float64)


def auc(scores, labels):
    """Probability that a random positive outranks a random negative."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pairwise(scores, labels):
    """Brute force over every positive/negative pair; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC undefined: needs at least one positive and one negative")
    wins = 0.0
    for p in pos:
        wins += (p > neg).sum() + 0.5 * (p == neg).sum()
    return wins / (pos.size * neg.size)


def gauc(user_ids, scores, labels):
    """Impression-weighted average of per-user AUC.

    Users whose impressions are single-class have no defined AUC and are
    excluded from both numerator and denominator.
    """
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    num = den = 0.0
    for u in np.unique(user_ids):
        mask = user_ids == u
        y = labels[mask]
        if y.min() == y.max():
            continue
        w = mask.sum()
        num += w * auc(scores[mask], y)
        den += w
    if den == 0:
        raise ValueError("GAUC undefined: no user has both classes")
    return num / den


def log_loss(probabilities, labels, return_clamped=False):
    """Mean binary cross-entropy; probabilities outside (0, 1) are clamped to
    [1e-12, 1 - 1e-12] and counted."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = _check_binary(labels)
    clamped = int(((p < 1e-12) | (p > 1.0 - 1e-12)).sum())
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    if return_clamped:
        return loss, clamped
    return loss
