"""Minimum-cost one-to-one assignment with distance gating."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal rectangular assignment; returns matched (row, col) index arrays."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def gated_assignment(cost: np.ndarray, gate: float):
    """Hungarian on ``cost``, then demote pairs whose cost exceeds ``gate``.

    Returns ``(pairs, unmatched_rows, unmatched_cols)`` with ``pairs`` an
    ``(K, 2)`` integer array sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    rows, cols = hungarian(cost)
    keep = cost[rows, cols] <= gate
    rows, cols = rows[keep], cols[keep]
    order = np.argsort(rows, kind="stable")
    pairs = np.stack([rows[order], cols[order]], axis=1) if len(rows) else np.zeros((0, 2), dtype=np.int64)
    unmatched_rows = np.setdiff1d(np.arange(n), rows)
    unmatched_cols = np.setdiff1d(np.arange(m), cols)
    return pairs, unmatched_rows, unmatched_cols


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
