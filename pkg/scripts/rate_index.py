"""
Binary indexed (Fenwick) tree over per-site jump rates.

Sampling inverts the cumulative sum in O(log N); updates are O(log N).
The running total is maintained incrementally and rebuilt from scratch
every `rebuild_every` events to bound floating-point drift.
"""

import numpy as np
from numba import njit

REBUILD_EVERY = 1_000_000
RATE_DRIFT_TOL = 1e-9


@njit(cache=True, nogil=True)
def fenwick_build(weights):
    n = weights.size
    tree = np.zeros(n + 1)
    for i in range(n):
        j = i + 1
        tree[j] += weights[i]
        k = j + (j & -j)
        if k <= n:
            tree[k] += tree[j]
    return tree


@njit(cache=True, nogil=True)
def fenwick_add(tree, i, delta):
    n = tree.size - 1
    j = i + 1
    while j <= n:
        tree[j] += delta
        j += j & -j


@njit(cache=True, nogil=True)
def fenwick_find(tree, weights, target):
    """Smallest index whose inclusive prefix sum exceeds target; lands on a positive weight."""
    n = tree.size - 1
    step = 1
    while step * 2 <= n:
        step *= 2
    pos = 0
    rem = target
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= rem:
            pos = nxt
            rem -= tree[nxt]
        step //= 2
    if pos >= n:
        pos = n - 1
    if weights[pos] <= 0.0:
        # drift put us on an empty site: nearest positive weight, searching left first
        k = pos
        while k >= 0 and weights[k] <= 0.0:
            k -= 1
        if k < 0:
            k = pos
            while k < n and weights[k] <= 0.0:
                k += 1
        pos = k
    return pos


class RateIndex:
    def __init__(self, weights: np.ndarray, rebuild_every: int = REBUILD_EVERY):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64).copy()
        if np.any(self.weights < 0.0):
            raise ValueError("rates must be non-negative")
        self.tree = fenwick_build(self.weights)
        self.total = float(self.weights.sum())
        self.rebuild_every = int(rebuild_every)
        self.since_rebuild = 0

    def exact_total(self) -> float:
        return float(self.weights.sum())

    def rebuild(self) -> float:
        """Recompute tree and total from scratch; returns the relative drift that was removed."""
        exact = self.exact_total()
        drift = abs(self.total - exact) / exact if exact > 0.0 else abs(self.total)
        self.tree = fenwick_build(self.weights)
        self.total = exact
        self.since_rebuild = 0
        return drift
