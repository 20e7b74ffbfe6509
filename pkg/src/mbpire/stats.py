"""Small statistical helpers shared by the verification harness."""

from __future__ import annotations

import math

import numpy as np
import scipy.stats

SIGMAS = 3.0
ALPHA = 0.01


def batch_means_se(x: np.ndarray, batch: int | None = None) -> float:
    """Standard error of the mean of a (dependent) stationary series.

    Non-overlapping batches of size ``floor(sqrt(n))`` by default; rows of a
    2-d input are treated as vectors and the l1 norm of the per-component
    errors is returned.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    b = batch or max(1, math.isqrt(n))
    k = n // b
    if k < 2:
        return float("inf")
    means = x[: k * b].reshape(k, b, -1).mean(axis=1)
    se = means.std(axis=0, ddof=1) / math.sqrt(k)
    return float(se.sum())


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n > 0 else float("inf")


def variance_se(x: np.ndarray) -> float:
    """Standard error of the sample variance from the fourth central moment."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    c = x - x.mean()
    m2 = (c**2).mean()
    m4 = (c**4).mean()
    return math.sqrt(max(m4 - (n - 3) / (n - 1) * m2**2, 0.0) / n)


def ks_normal(x: np.ndarray, variance: float) -> tuple[float, float]:
    """KS statistic and p-value against Normal(0, variance)."""
    res = scipy.stats.kstest(np.asarray(x, dtype=float).ravel(), "norm", args=(0.0, math.sqrt(variance)))
    return float(res.statistic), float(res.pvalue)


def pooled_bins(expected: np.ndarray, min_expected: float = 5.0) -> np.ndarray:
    """Group labels merging consecutive categories (in the given order) until
    each group's expected count reaches ``min_expected``."""
    labels = np.empty(expected.size, dtype=np.int64)
    g, acc = 0, 0.0
    for k, e in enumerate(expected):
        labels[k] = g
        acc += e
        if acc >= min_expected:
            g, acc = g + 1, 0.0
    if g > 0 and (labels == g).any():  # fold an undersized last group into its neighbour
        labels[labels == g] = g - 1
    return labels


def two_sample_chi2(a: np.ndarray, b: np.ndarray, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Homogeneity test for two samples of categorical rows (any hashable row encoding).

    Categories are pooled in decreasing order of total count so that every
    expected cell holds at least ``min_expected``.  Returns (statistic,
    p-value, number of pooled categories).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    both = np.concatenate([a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)])
    cats, inv = np.unique(both, axis=0, return_inverse=True)
    inv = inv.ravel()
    ca = np.bincount(inv[: a.shape[0]], minlength=cats.shape[0]).astype(float)
    cb = np.bincount(inv[a.shape[0]:], minlength=cats.shape[0]).astype(float)
    order = np.argsort(-(ca + cb), kind="stable")
    frac = min(a.shape[0], b.shape[0]) / (a.shape[0] + b.shape[0])
    labels = pooled_bins((ca + cb)[order] * frac, min_expected)
    table = np.zeros((2, labels.max() + 1))
    np.add.at(table[0], labels, ca[order])
    np.add.at(table[1], labels, cb[order])
    if table.shape[1] < 2:
        return 0.0, 1.0, table.shape[1]
    stat, p, _, _ = scipy.stats.chi2_contingency(table, correction=False)
    return float(stat), float(p), table.shape[1]


def within(value: float, target: float, band: float) -> bool:
    return bool(abs(value - target) <= band)
