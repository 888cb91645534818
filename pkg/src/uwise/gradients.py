"""Base gradient estimators, their U-statistic averages, and surrogate gradients.

Every estimator here is linear in the per-sample gradients of a
:class:`~uwise.models.SampleBatch`: averaging a base estimator over a
collection of index sets amounts to one coefficient per sample. The
``*_coefficients`` functions compute those coefficients from the
log-weights alone, and the gradient is ``coef @ per_sample_gradients``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import sort_descending, weight_profile
from .models import SampleBatch
from .subsets import (
    DEFAULT_CAP,
    CapExceededError,
    IndexSetCollection,
    SetKind,
    combination_array,
    membership_matrix,
)

__all__ = [
    "BASE_KINDS",
    "normalized_weights",
    "base_reparam_gradient",
    "base_dreg_gradient",
    "set_coefficients",
    "complete_coefficients",
    "u_statistic_gradient",
    "surrogate_coefficients",
    "surrogate_gradient",
    "finite_difference_gradient",
]

BASE_KINDS = ("reparam", "dreg")

# spread limits for the matrix-product path of the complete collection
_SPREAD = {"reparam": 600.0, "dreg": 300.0}


def normalized_weights(v: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, i.e. self-normalized importance weights."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _per_sample(batch: SampleBatch, base: str) -> np.ndarray:
    if base == "reparam":
        return batch.grad_v
    if base == "dreg":
        return batch.path_grad
    raise ValueError(f"unknown base gradient {base!r}; expected one of {BASE_KINDS}")


def _finite(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def _base(batch: SampleBatch, rows, base: str) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    if rows.size == 0 or rows.min() < 0 or rows.max() >= batch.n:
        raise ValueError("rows must be non-empty indices into the batch")
    # reduce in descending log-weight order so row order cannot matter
    rows = rows[np.lexsort((rows, -batch.v[rows]))]
    w = normalized_weights(batch.v[rows])
    if base == "dreg":
        w = w * w
    return _finite(w @ _per_sample(batch, base)[rows])


def base_reparam_gradient(batch: SampleBatch, rows) -> np.ndarray:
    """Reparameterization gradient of the kernel on the selected rows: ``sum_i w_i grad V_i``."""
    return _base(batch, rows, "reparam")


def base_dreg_gradient(batch: SampleBatch, rows) -> np.ndarray:
    """Doubly-reparameterized gradient: squared normalized weights on the path term only."""
    return _base(batch, rows, "dreg")


def set_coefficients(v: np.ndarray, sets: np.ndarray, base: str = "reparam") -> np.ndarray:
    """Per-sample coefficients of the base estimator averaged over explicit ``(k, m)`` sets."""
    if base not in BASE_KINDS:
        raise ValueError(f"unknown base gradient {base!r}")
    sets = np.asarray(sets, dtype=np.intp)
    w = normalized_weights(v[sets])
    if base == "dreg":
        w = w * w
    c = np.zeros(v.size)
    np.add.at(c, sets.ravel(), w.ravel())
    return c / sets.shape[0]


def complete_coefficients(
    v: np.ndarray, m: int, base: str = "reparam", cap: int = DEFAULT_CAP
) -> np.ndarray:
    """Coefficients for the complete collection, without enumerating sets one by one.

    With ``e = exp(v - max v)`` and subset sums ``s_S = sum_{j in S} e_j``,
    the reparameterization coefficient of sample ``i`` is
    ``e_i * mean_S [i in S] / s_S``; DReG squares both factors.
    """
    if base not in BASE_KINDS:
        raise ValueError(f"unknown base gradient {base!r}")
    n = v.size
    count = math.comb(n, m)
    if count > cap:
        raise CapExceededError(n, m, count, cap)
    if v.max() - v.min() >= _SPREAD[base]:
        return set_coefficients(v, combination_array(n, m), base)
    M = membership_matrix(n, m)
    e = np.exp(v - v.max())
    sums = e @ M
    if base == "reparam":
        return e * (M @ (1.0 / sums)) / count
    return e * e * (M @ sums**-2) / count


def u_statistic_gradient(batch: SampleBatch, S: IndexSetCollection, base: str = "reparam") -> np.ndarray:
    """Base estimator averaged over every set in ``S``."""
    if S.n != batch.n:
        raise ValueError(f"collection is over n={S.n} samples but batch has {batch.n}")
    if S.kind is SetKind.COMPLETE:
        c = complete_coefficients(batch.v, S.m, base, cap=len(S))
    else:
        c = set_coefficients(batch.v, S.sets, base)
    return _finite(c @ _per_sample(batch, base))


def surrogate_coefficients(v: np.ndarray, m: int, order: int = 1) -> np.ndarray:
    """Derivative of the first/second-order approximation with respect to each log-weight.

    The sort permutation is held fixed (ties resolved by index order).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    n = v.size
    if order == 2 and m < 2:
        raise ValueError("the second-order surrogate needs m >= 2")
    srt = sort_descending(v)
    prof = weight_profile(n, m)
    c_sorted = prof.w.copy()
    if order == 2:
        k = n - m + 1
        gaps = srt.sorted[1 : k + 1] - srt.sorted[:k]
        s = prof.w2 * expit(gaps)
        c_sorted[1 : k + 1] += s
        c_sorted[:k] -= s
    c = np.empty(n)
    c[srt.perm] = c_sorted
    return c


def surrogate_gradient(batch: SampleBatch, m: int, order: int = 1) -> np.ndarray:
    """Reparameterization gradient of the sort-based surrogate objective."""
    return _finite(surrogate_coefficients(batch.v, m, order) @ batch.grad_v)


def finite_difference_gradient(
    objective: Callable[[np.ndarray], float], params, step: float = 1e-5
) -> np.ndarray:
    """Central differences of ``objective`` at ``params``, one coordinate at a time."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(params, dtype=np.float64).reshape(-1)
    g = np.empty_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        g[j] = (objective(xp) - objective(xm)) / (2.0 * step)
    return g
