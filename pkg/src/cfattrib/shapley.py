"""Shapley estimators for games given as vectorized bitmask value functions.

A value function takes an int64 array of coalition bitmasks (bit ``i`` set
means player ``i`` is in the coalition) and returns one value per mask.
"""

from __future__ import annotations

import math
from collections.abc import Callable

import numpy as np

ValueFn = Callable[[np.ndarray], np.ndarray]


def shapley_weight(n: int, size: int) -> float:
    """Weight of a coalition of ``size`` players in player i's marginal sum: 1 / (n C(n-1, size))."""
    return 1.0 / (n * math.comb(n - 1, size))


def kernel_weight(n: int, size: int) -> float:
    """Shapley kernel (n-1) / (C(n, |S|) |S| (n-|S|)) for a proper non-empty coalition."""
    if not 0 < size < n:
        raise ValueError(f"kernel weight is undefined for |S|={size} with n={n}")
    return (n - 1) / (math.comb(n, size) * size * (n - size))


def popcount(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    count = np.zeros(masks.shape, dtype=np.int64)
    m = masks.copy()
    while np.any(m):
        count += m & 1
        m >>= 1
    return count


def unique_values(fn: ValueFn, masks: np.ndarray) -> np.ndarray:
    """Evaluate ``fn`` once per distinct mask and scatter back."""
    masks = np.asarray(masks, dtype=np.int64)
    uniq, inverse = np.unique(masks, return_inverse=True)
    return np.asarray(fn(uniq), dtype=float)[inverse.reshape(masks.shape)]


def exact_shapley(value_fn: ValueFn, n: int) -> np.ndarray:
    """Shapley values by enumerating all 2^n coalitions."""
    if n == 0:
        return np.zeros(0)
    masks = np.arange(1 << n, dtype=np.int64)
    v = np.asarray(value_fn(masks), dtype=float)
    sizes = popcount(masks)
    weights = np.array([shapley_weight(n, s) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        bit = np.int64(1) << i
        without = masks[(masks & bit) == 0]
        phi[i] = math.fsum(weights[sizes[without]] * (v[without | bit] - v[without]))
    return phi


def permutation_shapley(
    value_fn: ValueFn, n: int, M: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Monte Carlo Shapley values from ``M`` uniformly drawn player orderings.

    Each ordering costs n + 1 coalition values and yields one marginal
    contribution per player. Returns (mean, standard error, per-ordering
    contributions shaped (M, n)).
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if n == 0:
        return np.zeros(0), np.zeros(0), np.zeros((M, 0))
    perms = rng.permuted(np.tile(np.arange(n), (M, 1)), axis=1)
    prefixes = np.zeros((M, n + 1), dtype=np.int64)
    prefixes[:, 1:] = np.cumsum(np.int64(1) << perms.astype(np.int64), axis=1)
    v = np.asarray(value_fn(prefixes.reshape(-1)), dtype=float).reshape(M, n + 1)
    contrib = np.empty((M, n))
    contrib[np.arange(M)[:, None], perms] = v[:, 1:] - v[:, :-1]
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(n)
    return phi, se, contrib
