"""IW-ELBO objective estimators.

Single-vector functions take one vector of log-weights and return an
:class:`ObjectiveEstimate`. The ``batch_*`` functions evaluate the same
estimators on every row of an ``(R, n)`` array and are what the Monte Carlo
harness uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_log_weights, weight_profile
from .subsets import (
    DEFAULT_CAP,
    CapExceededError,
    IndexSetCollection,
    SetKind,
    all_subsets,
    disjoint_blocks,
    combination_array,
    membership_matrix,
)

__all__ = [
    "ObjectiveEstimate",
    "u_statistic",
    "standard_estimate",
    "complete_u",
    "approx_first_order",
    "approx_first_order_naive",
    "approx_second_order",
    "jackknife_first_order",
    "kernel_rows",
    "batch_kernel_mean",
    "batch_standard",
    "batch_complete_u",
    "batch_permuted",
    "batch_random",
    "batch_approx_first_order",
    "batch_approx_second_order",
]

# beyond this spread exp(v - max) may underflow to 0 and the matmul path is unsafe
_MATMUL_SPREAD = 600.0


@dataclass(frozen=True)
class ObjectiveEstimate:
    value: float
    estimator_id: str
    n: int
    m: int
    num_sets: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.estimator_id} produced a non-finite value")

    def __float__(self) -> float:
        return self.value


_ID_FOR_KIND = {
    SetKind.DISJOINT: "standard",
    SetKind.COMPLETE: "complete_u",
    SetKind.RANDOM: "incomplete:random",
    SetKind.PERMUTED_BLOCK: "incomplete:permuted_block",
}


def kernel_rows(x: np.ndarray) -> np.ndarray:
    """Kernel ``h`` along the last axis of ``x``.

    Each row is sorted descending first, so the reduction order is fixed by
    the values rather than by their positions.
    """
    x = -np.sort(-x, axis=-1)
    top = x[..., 0]
    m = x.shape[-1]
    return top + np.log1p(np.sum(np.exp(x[..., 1:] - top[..., None]), axis=-1)) - math.log(m)


def _mean_of_chunks(chunks) -> tuple[float, int]:
    totals, count = [], 0
    for c in chunks:
        totals.append(float(np.sum(c)))
        count += c.size
    return math.fsum(totals) / count, count


def u_statistic(v, S: IndexSetCollection) -> ObjectiveEstimate:
    """Average of the kernel over the subsets in ``S``."""
    lw = as_log_weights(v)
    if S.n != lw.n:
        raise ValueError(f"collection is over n={S.n} indices but got {lw.n} log-weights")
    if S.kind is SetKind.COMPLETE:
        # the complete collection is symmetric, so enumerate positions of the
        # sorted vector: every row is then already in descending order
        desc = -np.sort(-lw.values)
        chunks = (kernel_rows(desc[idx]) for idx in S.iter_chunks())
    else:
        vals = lw.values
        chunks = (kernel_rows(vals[idx]) for idx in S.iter_chunks())
    value, count = _mean_of_chunks(chunks)
    return ObjectiveEstimate(value, _ID_FOR_KIND[S.kind], lw.n, S.m, count)


def standard_estimate(v, m: int) -> ObjectiveEstimate:
    lw = as_log_weights(v)
    return u_statistic(lw, disjoint_blocks(lw.n, m))


def complete_u(v, m: int, cap: int = DEFAULT_CAP) -> ObjectiveEstimate:
    lw = as_log_weights(v)
    return u_statistic(lw, all_subsets(lw.n, m, cap))


def _sorted_desc(v) -> np.ndarray:
    return -np.sort(-as_log_weights(v).values)


def approx_first_order(v, m: int) -> ObjectiveEstimate:
    """Average subset maximum minus ``ln m``, in O(n log n) via one sort."""
    desc = _sorted_desc(v)
    prof = weight_profile(desc.size, m)
    value = float(np.dot(prof.w, desc)) - math.log(m)
    return ObjectiveEstimate(value, "approx1", desc.size, m, math.comb(desc.size, m))


def approx_first_order_naive(v, m: int, cap: int = DEFAULT_CAP) -> ObjectiveEstimate:
    """Brute-force subset-maximum form of :func:`approx_first_order` (oracle)."""
    lw = as_log_weights(v)
    S = all_subsets(lw.n, m, cap)
    vals = lw.values
    value, count = _mean_of_chunks(np.max(vals[idx], axis=1) for idx in S.iter_chunks())
    return ObjectiveEstimate(value - math.log(m), "approx1", lw.n, m, count)


def approx_second_order(v, m: int) -> ObjectiveEstimate:
    """First-order approximation plus a single log-correction per sorted gap.

    Tighter than :func:`approx_first_order` and still a lower bound on the
    complete U-statistic.
    """
    desc = _sorted_desc(v)
    n = desc.size
    if m < 2:
        raise ValueError("the second-order approximation needs m >= 2")
    prof = weight_profile(n, m)
    k = n - m + 1
    gaps = desc[1 : k + 1] - desc[:k]  # <= 0 by construction
    corr = np.log1p(np.exp(gaps))
    value = (float(np.dot(prof.w, desc)) + float(np.dot(prof.w2, corr))) - math.log(m)
    return ObjectiveEstimate(value, "approx2", n, m, math.comb(n, m))


def jackknife_first_order(
    v, m: int, cap: int = DEFAULT_CAP, inner: str = "complete"
) -> ObjectiveEstimate:
    """Bias-corrected evidence estimate ``m*U(n,m) - (m-1)*U(n,m-1)``.

    ``inner`` selects the estimator for both terms: ``"complete"`` or
    ``"approx2"``. With ``approx2`` and ``m == 2`` the second term uses the
    sample mean, which is the exact ``U(n,1)``.
    """
    lw = as_log_weights(v)
    if m < 2 or m > lw.n:
        raise ValueError(f"need 2 <= m <= n, got m={m}, n={lw.n}")
    if inner == "complete":
        hi = complete_u(lw, m, cap)
        lo = complete_u(lw, m - 1, cap)
    elif inner == "approx2":
        hi = approx_second_order(lw, m)
        lo = approx_second_order(lw, m - 1) if m > 2 else approx_first_order(lw, 1)
    else:
        raise ValueError(f"unknown inner estimator {inner!r}")
    value = m * hi.value - (m - 1) * lo.value
    return ObjectiveEstimate(value, "jackknife", lw.n, m, hi.num_sets + lo.num_sets)


# ---------------------------------------------------------------------------
# batched evaluation over replicates (rows)


def _as_batch(V) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("expected an (R, n) array of log-weights")
    return V


def batch_kernel_mean(V, sets: np.ndarray, row_chunk: int = 256) -> np.ndarray:
    """Mean kernel value over a fixed ``(k, m)`` set array, for each row of ``V``."""
    V = _as_batch(V)
    out = np.empty(V.shape[0])
    step = max(1, row_chunk * 4096 // max(1, sets.size))
    for i in range(0, V.shape[0], step):
        out[i : i + step] = kernel_rows(V[i : i + step][:, sets]).mean(axis=1)
    return out


def batch_standard(V, m: int) -> np.ndarray:
    V = _as_batch(V)
    R, n = V.shape
    if n % m:
        raise ValueError(f"m={m} does not divide n={n}")
    return kernel_rows(V.reshape(R, n // m, m)).mean(axis=1)


def batch_complete_u(V, m: int, cap: int = DEFAULT_CAP, row_chunk: int = 1024) -> np.ndarray:
    """Complete U-statistic for each row.

    Subset sums of ``exp(v - max)`` come from one matrix product with the
    subset-membership matrix; rows whose spread could underflow fall back to
    the per-subset stable kernel.
    """
    V = _as_batch(V)
    R, n = V.shape
    count = math.comb(n, m)
    if count > cap:
        raise CapExceededError(n, m, count, cap)
    M = membership_matrix(n, m)
    out = np.empty(R)
    top = V.max(axis=1)
    safe = (top - V.min(axis=1)) < _MATMUL_SPREAD
    lm = math.log(m)
    for i in range(0, R, row_chunk):
        sl = slice(i, i + row_chunk)
        sums = np.exp(V[sl] - top[sl, None]) @ M
        with np.errstate(divide="ignore"):
            out[sl] = np.log(sums).mean(axis=1) + top[sl] - lm
    bad = np.flatnonzero(~safe)
    if bad.size:
        out[bad] = batch_kernel_mean(V[bad], combination_array(n, m))
    return out


def batch_permuted(V, m: int, ell: int, rng: np.random.Generator) -> np.ndarray:
    """Permuted-block estimator with fresh permutations per row."""
    V = _as_batch(V)
    R, n = V.shape
    if n % m:
        raise ValueError(f"m={m} does not divide n={n}")
    perms = rng.permuted(np.broadcast_to(np.arange(n), (R, ell, n)), axis=2)
    Vp = np.take_along_axis(V[:, None, :], perms, axis=2)
    return kernel_rows(Vp.reshape(R, ell * (n // m), m)).mean(axis=1)


def batch_random(V, m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random-subset estimator with ``k`` fresh subsets per row."""
    V = _as_batch(V)
    R, n = V.shape
    draws = rng.permuted(np.broadcast_to(np.arange(n), (R, k, n)), axis=2)[:, :, :m]
    Vs = np.take_along_axis(V, draws.reshape(R, k * m), axis=1)
    return kernel_rows(Vs.reshape(R, k, m)).mean(axis=1)


def batch_approx_first_order(V, m: int) -> np.ndarray:
    V = _as_batch(V)
    desc = -np.sort(-V, axis=1)
    return desc @ weight_profile(V.shape[1], m).w - math.log(m)


def batch_approx_second_order(V, m: int) -> np.ndarray:
    V = _as_batch(V)
    n = V.shape[1]
    if m < 2:
        raise ValueError("the second-order approximation needs m >= 2")
    desc = -np.sort(-V, axis=1)
    prof = weight_profile(n, m)
    k = n - m + 1
    corr = np.log1p(np.exp(desc[:, 1 : k + 1] - desc[:, :k]))
    return (desc @ prof.w + corr @ prof.w2) - math.log(m)
