"""Scalar kernels, sorting and binomial weight profiles shared by all estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "LogWeights",
    "SortedLogWeights",
    "WeightProfile",
    "as_log_weights",
    "log_sum_exp",
    "kernel_h",
    "sort_descending",
    "weight_profile",
    "exact_weight_profile",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LogWeights:
    """Vector of ``n >= 1`` finite log importance weights (nats)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise ValueError("log-weights must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("log-weights must be finite (got NaN or inf)")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


def as_log_weights(v) -> LogWeights:
    return v if isinstance(v, LogWeights) else LogWeights(v)


@dataclass(frozen=True)
class SortedLogWeights:
    """Log-weights in non-increasing order.

    ``perm`` is 0-based: ``sorted[i] == values[perm[i]]``. Ties keep
    ascending original index.
    """

    sorted: np.ndarray
    perm: np.ndarray


@dataclass(frozen=True)
class WeightProfile:
    """Normalized binomial weights for the sort-based approximations.

    ``w[i] = C(n-1-i, m-1) / C(n, m)`` (0-based ``i``) is the fraction of
    size-``m`` subsets whose largest element is the ``i``-th largest
    log-weight. ``w2`` has length ``n - m + 1`` and holds
    ``C(n-2-i, m-2) / C(n, m)``; it is empty for ``m == 1``.
    """

    n: int
    m: int
    w: np.ndarray
    w2: np.ndarray


def _check_vector(v) -> np.ndarray:
    a = np.asarray(v.values if isinstance(v, LogWeights) else v, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    return a


def _lse_sorted(desc: np.ndarray) -> float:
    # desc[0] is the maximum; the remaining terms are <= 1 after shifting.
    return float(desc[0] + np.log1p(np.sum(np.exp(desc[1:] - desc[0]))))


def log_sum_exp(v) -> float:
    """Stable ``ln sum_i exp(v_i)``.

    Inputs are reduced in descending order, so the result does not depend
    on the order in which they are given.
    """
    a = _check_vector(v)
    return _lse_sorted(-np.sort(-a))


def kernel_h(v) -> float:
    """IW-ELBO kernel ``ln((1/m) sum_i exp(v_i))`` for one batch of ``m`` log-weights."""
    a = _check_vector(v)
    return _lse_sorted(-np.sort(-a)) - math.log(a.size)


def sort_descending(v) -> SortedLogWeights:
    a = as_log_weights(v).values
    # stable sort on the negated values keeps index order among ties
    perm = np.argsort(-a, kind="stable")
    return SortedLogWeights(sorted=_frozen(a[perm]), perm=_frozen(perm))


def _check_nm(n: int, m: int) -> None:
    if not (isinstance(n, (int, np.integer)) and isinstance(m, (int, np.integer))):
        raise TypeError("n and m must be integers")
    if n < 1 or m < 1 or m > n:
        raise ValueError(f"need 1 <= m <= n, got n={n}, m={m}")


def weight_profile(n: int, m: int) -> WeightProfile:
    """Normalized weight profile via the multiplicative binomial recurrence.

    Never forms raw binomial coefficients, so any ``n`` is safe.
    """
    _check_nm(n, m)
    n, m = int(n), int(m)
    i = np.arange(1, n, dtype=np.float64)  # 1-based i for the step i -> i+1
    ratios = np.maximum(n - i - m + 1, 0.0) / (n - i)
    w = np.empty(n)
    w[0] = m / n
    w[1:] = w[0] * np.cumprod(ratios)
    if m == 1:
        w2 = np.empty(0)
    else:
        k = n - m + 1
        w2 = np.empty(k)
        w2[0] = m * (m - 1) / (n * (n - 1))
        if k > 1:
            j = np.arange(1, k, dtype=np.float64)
            w2[1:] = w2[0] * np.cumprod((n - j - m + 1) / (n - 1 - j))
    return WeightProfile(n=n, m=m, w=_frozen(w), w2=_frozen(w2))


def exact_weight_profile(n: int, m: int) -> tuple[list[Fraction], list[Fraction]]:
    """Exact rational profile from big-integer binomials (test oracle)."""
    _check_nm(n, m)
    total = math.comb(n, m)
    w = [Fraction(math.comb(n - i, m - 1) if i <= n - m + 1 else 0, total) for i in range(1, n + 1)]
    if m == 1:
        return w, []
    w2 = [Fraction(math.comb(n - 1 - i, m - 2), total) for i in range(1, n - m + 2)]
    return w, w2
