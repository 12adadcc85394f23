"""Wilcoxon rank-sum (Mann-Whitney) and signed-rank tests.

Small samples get exact p-values from the full permutation distribution of
the (mid)rank statistic, computed by dynamic programming over doubled ranks
so that ties stay integral.  Larger samples use the tie-corrected normal
approximation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import DegenerateInputError, InputError

RANKSUM_EXACT_MAX_N = 12
SIGNEDRANK_EXACT_MAX_N = 20


@dataclass(frozen=True)
class StatTestResult:
    statistic: float
    p_value: float
    method: str
    n: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "method": self.method, "n": list(self.n)}


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    return sps.rankdata(np.asarray(values, dtype=float), method="average")


def _tie_term(values) -> float:
    _, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    return float(np.sum(counts.astype(float) ** 3 - counts))


def _subset_sum_counts(weights: np.ndarray, k: int) -> np.ndarray:
    """counts[s] = number of k-subsets of integer ``weights`` summing to s."""
    total = int(weights.sum())
    dp = np.zeros((k + 1, total + 1), dtype=object)
    dp[0, 0] = 1
    for w in weights:
        w = int(w)
        for j in range(k, 0, -1):
            dp[j, w:] = dp[j, w:] + dp[j - 1, : total + 1 - w]
    return dp[k]


def _two_sided_exact(counts: np.ndarray, observed: int, center2: int) -> float:
    """P(|2S - center2| >= |2·observed - center2|) for integer-valued S."""
    s = np.arange(counts.size)
    dev = np.abs(2 * s - center2)
    extreme = dev >= abs(2 * observed - center2)
    num = sum(counts[extreme])
    den = sum(counts)
    return min(1.0, float(num) / float(den))


def ranksum_test(a, b, alternative: str = "two-sided") -> StatTestResult:
    """Two-sample Wilcoxon rank-sum test; ``statistic`` is the Mann-Whitney U of ``a``."""
    if alternative != "two-sided":
        raise ValueError("only the two-sided alternative is supported")
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("both samples must be non-empty")
    na, nb = a.size, b.size
    N = na + nb
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    w = float(ranks[:na].sum())
    u = w - na * (na + 1) / 2.0

    if N <= RANKSUM_EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _subset_sum_counts(doubled, na)
        p = _two_sided_exact(counts, int(round(2 * w)), 2 * na * (N + 1))
        return StatTestResult(u, p, "exact", (na, nb))

    mean = na * nb / 2.0
    var = na * nb / 12.0 * ((N + 1) - _tie_term(pooled) / (N * (N - 1)))
    if var <= 0:
        return StatTestResult(u, 1.0, "normal-approximation", (na, nb))
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return StatTestResult(u, min(1.0, 2.0 * sps.norm.sf(z)), "normal-approximation", (na, nb))


def signedrank_test(x, y=None, alternative: str = "two-sided") -> StatTestResult:
    """Paired Wilcoxon signed-rank test on ``x - y`` (or on ``x`` if ``y`` is None).

    Zero differences are dropped; ``statistic`` is W+, the rank sum of the
    positive differences.
    """
    if alternative != "two-sided":
        raise ValueError("only the two-sided alternative is supported")
    d = np.asarray(x, dtype=float).ravel()
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.shape != d.shape:
            raise InputError("paired samples must have equal length")
        d = d - y
    if d.size == 0:
        raise InputError("no pairs given")
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateInputError("all paired differences are zero")
    n = d.size
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= SIGNEDRANK_EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = np.zeros(int(doubled.sum()) + 1, dtype=object)
        counts[0] = 1
        for r in doubled:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[: counts.size - r]
            counts = counts + shifted
        p = _two_sided_exact(counts, int(round(2 * w_plus)), int(doubled.sum()))
        return StatTestResult(w_plus, p, "exact", (n,))

    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    if var <= 0:
        return StatTestResult(w_plus, 1.0, "normal-approximation", (n,))
    z = abs(w_plus - mean) / math.sqrt(var)
    return StatTestResult(w_plus, min(1.0, 2.0 * sps.norm.sf(z)), "normal-approximation", (n,))
