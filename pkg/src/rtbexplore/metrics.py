"""Offline evaluation metrics: AUC and log loss.

Both are implemented directly (no sklearn) so their numerical behavior is
fully pinned: AUC via average ranks — algebraically identical to the
pairwise count with ties at one half — and log loss as the mean negative
log-likelihood with strict rejection of impossible scores at exactly 0 or 1.
"""

from __future__ import annotations

import numpy as np


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if s.size == 0:
        raise ValueError("need at least one example")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties 0.5.

    Computed with average ranks, which equals the O(n^2) pairwise count
    exactly (ranks are half-integers, summed without rounding in float64).
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both a positive and a negative example")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = cum - (counts - 1) / 2.0  # mean of the 1-based ranks in each tie group
    ranks = avg_rank[inverse]
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def log_loss(scores, labels) -> float:
    """Mean negative log-likelihood of binary labels under the scores."""
    s, y = _validate(scores, labels)
    if np.any(s <= 0.0) or np.any(s >= 1.0):
        raise ValueError("log loss requires scores strictly inside (0, 1)")
    terms = np.where(y == 1, -np.log(s), -np.log1p(-s))
    return float(terms.mean())
