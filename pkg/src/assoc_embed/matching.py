"""Maximum-weight bipartite matching on small dense matrices."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def max_weight_matching(weights, allowed=None) -> list[tuple[int, int]]:
    """Return ``(row, col)`` pairs of a maximum-weight matching.

    Only ``allowed`` pairs may be matched. Among matchings that use the most
    allowed pairs, the one with the largest total weight is chosen, so a
    negative weight never leaves a matchable row unmatched. Pairs come back
    sorted by row.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        return []
    ok = np.ones(w.shape, bool) if allowed is None else np.asarray(allowed, bool)
    if not ok.any():
        return []
    r = min(w.shape)
    scale = np.abs(w[ok]).max()
    # forbidden pairs cost more than any swap among allowed ones could gain
    penalty = 1.0 + 2.0 * r * scale
    cost = np.where(ok, w, -penalty)
    rows, cols = linear_sum_assignment(cost, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]]
