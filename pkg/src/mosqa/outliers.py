"""One-dimensional DBSCAN and isolation forest for small rating groups."""
from __future__ import annotations

import math
from collections import deque

import numpy as np

NOISE = -1
EULER_GAMMA = 0.5772156649015329


def dbscan_1d(points, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (0, 1, ...) or ``NOISE`` for each point.

    A point is core when at least ``min_pts`` points, itself included, lie
    within ``eps``.  Clusters are seeded from core points in index order and
    a border point joins the first cluster that reaches it.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.size == 0:
        raise ValueError("dbscan_1d needs at least one point")
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    neighbours = [np.flatnonzero(np.abs(x - xi) <= eps) for xi in x]
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    labels = np.full(x.size, NOISE)
    cluster = 0
    for i in range(x.size):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for k in neighbours[j]:
                if labels[k] == NOISE:
                    labels[k] = cluster
                    queue.append(k)
        cluster += 1
    return labels


def harmonic_number(n: int) -> float:
    if n < 1:
        return 0.0
    if n <= 64:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n)


def average_path_length(n: int) -> float:
    """Mean unsuccessful-search path length of a binary search tree on ``n`` keys."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic_number(n - 1) - 2.0 * (n - 1) / n


def _grow(values, depth, limit, rng):
    if depth >= limit or values.size <= 1:
        return values.size
    lo, hi = values.min(), values.max()
    if lo == hi:
        return values.size
    split = rng.uniform(lo, hi)
    left = values[values < split]
    right = values[values >= split]
    return (split, _grow(left, depth + 1, limit, rng), _grow(right, depth + 1, limit, rng))


def _path_length(node, x, depth=0):
    while isinstance(node, tuple):
        split, left, right = node
        node = left if x < split else right
        depth += 1
    return depth + average_path_length(node)


def isolation_forest_1d(points, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> np.ndarray:
    """Anomaly score ``2 ** (-E[h(x)] / c(psi))`` for each point, in (0, 1).

    Each tree is grown on ``psi = min(subsample, n)`` points drawn without
    replacement, splitting at a uniform value between the node's extremes, up
    to depth ``ceil(log2(psi))``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.size < 2:
        raise ValueError("isolation_forest_1d needs at least two points")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    rng = np.random.default_rng(seed)
    psi = min(subsample, x.size)
    limit = math.ceil(math.log2(psi))
    depth_sum = np.zeros(x.size)
    for _ in range(n_trees):
        sample = x[rng.choice(x.size, size=psi, replace=False)]
        tree = _grow(sample, 0, limit, rng)
        depth_sum += [_path_length(tree, xi) for xi in x]
    return 2.0 ** (-(depth_sum / n_trees) / average_path_length(psi))
