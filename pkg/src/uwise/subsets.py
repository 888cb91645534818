"""Index-set collections for U-statistic estimators.

Indices are 0-based inside the library; :meth:`IndexSetCollection.to_json`
writes the 1-based form used for ``--dump-sets``.
"""

from __future__ import annotations

import enum
import functools
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "DEFAULT_CAP",
    "CapExceededError",
    "SetKind",
    "IndexSetCollection",
    "disjoint_blocks",
    "all_subsets",
    "random_subsets",
    "permuted_blocks",
    "iter_combination_chunks",
    "combination_array",
    "membership_matrix",
    "recommend_ell",
]

DEFAULT_CAP = 10**6


class SetKind(str, enum.Enum):
    DISJOINT = "disjoint"
    COMPLETE = "complete"
    RANDOM = "random"
    PERMUTED_BLOCK = "permuted_block"


class CapExceededError(ValueError):
    """Raised when a complete enumeration would exceed the configured cap."""

    def __init__(self, n: int, m: int, count: int, cap: int):
        self.n, self.m, self.count, self.cap = n, m, count, cap
        ell = recommend_ell(0.95)
        super().__init__(
            f"C({n},{m}) = {count:,} subsets exceeds cap {cap:,}; "
            f"use permuted blocks instead (ell={ell} keeps 95% of the variance reduction)"
        )


def recommend_ell(fraction: float) -> int:
    """Smallest permutation count whose guaranteed reduction fraction ``1 - 1/ell`` reaches ``fraction``."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    return max(1, math.ceil(1.0 / (1.0 - fraction) - 1e-12))


def _check_nm(n: int, m: int) -> None:
    if n < 1 or m < 1 or m > n:
        raise ValueError(f"need 1 <= m <= n, got n={n}, m={m}")


def _check_divides(n: int, m: int) -> None:
    _check_nm(n, m)
    if n % m:
        raise ValueError(f"m={m} does not divide n={n}")


@dataclass(frozen=True)
class IndexSetCollection:
    """Multiset of size-``m`` subsets of ``range(n)``.

    For ``COMPLETE`` the sets are not stored; they are streamed from the
    lexicographic iterator on demand (``sets`` materializes them).
    """

    n: int
    m: int
    kind: SetKind
    _sets: np.ndarray | None = field(default=None, repr=False)
    k: int | None = None
    ell: int | None = None

    def __len__(self) -> int:
        if self.kind is SetKind.COMPLETE:
            return math.comb(self.n, self.m)
        return self._sets.shape[0]

    @property
    def r(self) -> int:
        return self.n // self.m

    @property
    def sets(self) -> np.ndarray:
        """``(len(self), m)`` array of strictly increasing indices."""
        if self._sets is not None:
            return self._sets
        return np.concatenate(list(iter_combination_chunks(self.n, self.m)), axis=0)

    def iter_chunks(self, chunk: int = 1 << 15) -> Iterator[np.ndarray]:
        if self._sets is None:
            yield from iter_combination_chunks(self.n, self.m, chunk)
        else:
            for i in range(0, self._sets.shape[0], chunk):
                yield self._sets[i : i + chunk]

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        if self._sets is None:
            return itertools.combinations(range(self.n), self.m)
        return (tuple(int(i) for i in s) for s in self._sets)

    def to_json(self) -> str:
        return json.dumps([[i + 1 for i in s] for s in self])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def iter_combination_chunks(n: int, m: int, chunk: int = 1 << 15) -> Iterator[np.ndarray]:
    """Lexicographic size-``m`` combinations of ``range(n)`` in array chunks."""
    it = itertools.combinations(range(n), m)
    while True:
        flat = np.fromiter(
            itertools.chain.from_iterable(itertools.islice(it, chunk)), dtype=np.intp
        )
        if flat.size == 0:
            return
        yield flat.reshape(-1, m)


@functools.lru_cache(maxsize=8)
def combination_array(n: int, m: int) -> np.ndarray:
    """All lexicographic size-``m`` subsets as one read-only ``(C(n, m), m)`` array."""
    return _frozen(np.concatenate(list(iter_combination_chunks(n, m)), axis=0))


@functools.lru_cache(maxsize=8)
def membership_matrix(n: int, m: int) -> np.ndarray:
    """``(n, C(n, m))`` 0/1 matrix; column ``j`` marks the ``j``-th lexicographic subset."""
    idx = combination_array(n, m)
    M = np.zeros((n, idx.shape[0]))
    M[idx, np.arange(idx.shape[0])[:, None]] = 1.0
    M.setflags(write=False)
    return M


def disjoint_blocks(n: int, m: int) -> IndexSetCollection:
    _check_divides(n, m)
    sets = np.arange(n, dtype=np.intp).reshape(n // m, m)
    return IndexSetCollection(n, m, SetKind.DISJOINT, _frozen(sets))


def all_subsets(n: int, m: int, cap: int = DEFAULT_CAP) -> IndexSetCollection:
    _check_nm(n, m)
    count = math.comb(n, m)
    if count > cap:
        raise CapExceededError(n, m, count, cap)
    return IndexSetCollection(n, m, SetKind.COMPLETE)


def random_subsets(n: int, m: int, k: int, rng: np.random.Generator) -> IndexSetCollection:
    """``k`` independent uniform size-``m`` subsets, drawn with replacement."""
    _check_nm(n, m)
    if k < 1:
        raise ValueError("k must be >= 1")
    draws = rng.permuted(np.broadcast_to(np.arange(n, dtype=np.intp), (k, n)), axis=1)
    sets = np.sort(draws[:, :m], axis=1)
    return IndexSetCollection(n, m, SetKind.RANDOM, _frozen(sets), k=k)


def blocks_from_permutations(perms: np.ndarray, m: int) -> np.ndarray:
    """Cut each permutation row into consecutive size-``m`` blocks, sorted within block."""
    ell, n = perms.shape
    return np.sort(perms.reshape(ell * (n // m), m), axis=1)


def permuted_blocks(n: int, m: int, ell: int, rng: np.random.Generator) -> IndexSetCollection:
    """``ell`` uniform permutations of ``range(n)``, each cut into ``n/m`` disjoint blocks."""
    _check_divides(n, m)
    if ell < 1:
        raise ValueError("ell must be >= 1")
    perms = np.stack([rng.permutation(n) for _ in range(ell)])
    sets = blocks_from_permutations(perms, m)
    return IndexSetCollection(n, m, SetKind.PERMUTED_BLOCK, _frozen(sets), ell=ell)
