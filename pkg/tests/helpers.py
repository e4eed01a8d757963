"""Independent oracles used by the test suite.

These deliberately recompute results through different code paths than the
library (pure-Python pair loops vs vectorized enumeration, set arithmetic vs
array arithmetic, integer-grid voxel walks vs broadcast masks) so that each
check is a genuine cross-validation, not a mirror of the implementation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def pair_count_u(a, b) -> float:
    """U statistic by explicit pair loops: wins count 1, ties count 1/2."""
    u = 0.0
    for x in a:
        for y in b:
            if x > y:
                u += 1.0
            elif x == y:
                u += 0.5
    return u


def brute_force_mwu_p(a, b) -> float:
    """P(U >= U_observed) by enumerating every label assignment of the pooled
    sample, computing each U with plain pair loops."""
    pooled = list(a) + list(b)
    n = len(pooled)
    n_a = len(a)
    u_obs = pair_count_u(a, b)
    at_least = 0
    total = 0
    for combo in itertools.combinations(range(n), n_a):
        chosen = set(combo)
        xs = [pooled[i] for i in combo]
        ys = [pooled[i] for i in range(n) if i not in chosen]
        if pair_count_u(xs, ys) >= u_obs:
            at_least += 1
        total += 1
    return at_least / total


def monte_carlo_mwu_p(a, b, draws: int, seed: int) -> float:
    """Monte-Carlo permutation estimate of P(U >= U_observed) for tie-free
    samples, via rank sums of random labelings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    n = pooled.size
    n_a = a.size
    assert np.unique(pooled).size == n, "monte_carlo_mwu_p requires tie-free data"
    order = pooled.argsort()
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.arange(1, n + 1)
    u_obs = ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0

    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 100_000
    remaining = draws
    while remaining > 0:
        m = min(chunk, remaining)
        perm = rng.random((m, n)).argsort(axis=1)[:, :n_a]
        u = ranks[perm].sum(axis=1) - n_a * (n_a + 1) / 2.0
        hits += int(np.count_nonzero(u >= u_obs))
        remaining -= m
    return hits / draws


def dice_by_sets(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Overlap score recomputed with Python set arithmetic on voxel indices."""
    sa = set(map(tuple, np.argwhere(np.asarray(mask_a).astype(bool))))
    sb = set(map(tuple, np.argwhere(np.asarray(mask_b).astype(bool))))
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def sphere_voxel_count(center, radius: float) -> int:
    """Voxels whose centers lie within a sphere, by walking the integer grid."""
    cx, cy, cz = center
    r2 = radius * radius
    count = 0
    for i in range(math.floor(cx - radius) - 1, math.ceil(cx + radius) + 2):
        for j in range(math.floor(cy - radius) - 1, math.ceil(cy + radius) + 2):
            for k in range(math.floor(cz - radius) - 1, math.ceil(cz + radius) + 2):
                if (i - cx) ** 2 + (j - cy) ** 2 + (k - cz) ** 2 <= r2:
                    count += 1
    return count


def first_argmin(values) -> int:
    """1-based index of the first minimum."""
    best = min(values)
    for i, v in enumerate(values, start=1):
        if v == best:
            return i
    raise ValueError("empty series")
