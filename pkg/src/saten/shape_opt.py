"""Choice of the folding geometry ``(n_1..n_k | m_1..m_d)`` of a weight matrix.

The exact storage objective depends on TT ranks that are unknown before
decomposition. Production code uses the min-sum surrogate instead: each side
is factorized independently into its most balanced factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InfeasibleFactorizationError, ParameterError, ShapeError

EXACT_SEARCH_LIMIT = 64


@dataclass(frozen=True)
class FoldPlan:
    input_factors: tuple[int, ...]
    output_factors: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_factors", tuple(int(f) for f in self.input_factors))
        object.__setattr__(self, "output_factors", tuple(int(f) for f in self.output_factors))
        if not self.input_factors or not self.output_factors:
            raise ShapeError("both sides of a fold plan need at least one factor")
        if any(f < 2 for f in self.input_factors + self.output_factors):
            raise ShapeError(f"fold factors must be >= 2: {self}")

    @property
    def n_rows(self) -> int:
        return math.prod(self.input_factors)

    @property
    def n_cols(self) -> int:
        return math.prod(self.output_factors)

    @property
    def k(self) -> int:
        return len(self.input_factors)

    @property
    def d(self) -> int:
        return len(self.output_factors)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return self.input_factors + self.output_factors

    def __str__(self):
        left = ",".join(map(str, self.input_factors))
        right = ",".join(map(str, self.output_factors))
        return f"({left} | {right})"


def _divisors(n: int) -> list[int]:
    small, large = [], []
    for a in range(1, math.isqrt(n) + 1):
        if n % a == 0:
            small.append(a)
            if a != n // a:
                large.append(n // a)
    return small + large[::-1]


@lru_cache(maxsize=None)
def _best(n: int, num_factors: int, lo: int):
    # Best non-decreasing factorization of n into num_factors factors >= lo,
    # ranked by (sum, factors). None if infeasible.
    if num_factors == 1:
        return (n,) if n >= lo else None
    best = None
    for a in _divisors(n):
        if a < lo:
            continue
        if a ** num_factors > n:
            break
        rest = _best(n // a, num_factors - 1, a)
        if rest is None:
            continue
        cand = (a,) + rest
        if best is None or (sum(cand), cand) < (sum(best), best):
            best = cand
    return best


def balanced_factorization(n: int, num_factors: int) -> tuple[int, ...]:
    """Factor ``n`` into ``num_factors`` integers >= 2 with the smallest sum.

    Ties go to the lexicographically smallest list; the result is sorted.

    >>> balanced_factorization(768, 3)
    (8, 8, 12)
    """
    n, num_factors = int(n), int(num_factors)
    if n < 2:
        raise ParameterError(f"n must be >= 2, got {n}")
    if num_factors < 1:
        raise ParameterError(f"num_factors must be >= 1, got {num_factors}")
    result = _best(n, num_factors, 2)
    if result is None:
        raise InfeasibleFactorizationError(n, num_factors)
    return result


def default_num_factors(n: int) -> int:
    return 3 if n >= 512 else 2


def plan_fold(n_rows: int, n_cols: int, k: int, d: int) -> FoldPlan:
    """Independent balanced factorizations of both matrix dimensions."""
    factors = []
    for side, n, count in (("input", n_rows, k), ("output", n_cols, d)):
        try:
            factors.append(balanced_factorization(n, count))
        except InfeasibleFactorizationError as exc:
            raise InfeasibleFactorizationError(n, count, side) from exc
    return FoldPlan(*factors)


def plan_fold_with_fallback(
    n_rows: int, n_cols: int, k: int | None = None, d: int | None = None
) -> tuple[FoldPlan, list[str]]:
    """Like :func:`plan_fold`, but degrade the factor count instead of failing.

    Missing ``k``/``d`` default to :func:`default_num_factors`. Returns the plan
    and a list of human-readable notes, one per fallback taken.
    """
    notes = []
    sides = []
    for side, n, count in (("input", n_rows, k), ("output", n_cols, d)):
        if n < 2:
            raise ShapeError(f"{side} dimension {n} cannot be folded")
        want = default_num_factors(n) if count is None else int(count)
        got = want
        while got > 1 and _best(n, got, 2) is None:
            got -= 1
        if got != want:
            notes.append(f"{side} dimension {n}: {want} factors infeasible, used {got}")
        sides.append(balanced_factorization(n, got))
    return FoldPlan(*sides), notes


def _ordered_factorizations(n: int, num_factors: int):
    if num_factors == 1:
        if n >= 2:
            yield (n,)
        return
    for a in _divisors(n):
        if a >= 2:
            for rest in _ordered_factorizations(n // a, num_factors - 1):
                yield (a,) + rest


def exact_storage_optimum(
    w: np.ndarray, k: int, d: int, epsilon: float
) -> FoldPlan:
    """Brute-force the storage-optimal fold plan (test oracle only).

    Every ordered factorization of both sides is decomposed with ``tt_svd`` at
    ``epsilon``; the plan with the fewest TT parameters wins, ties broken by
    factor sum and then lexicographically.
    """
    from .tt import tt_param_count, tt_svd

    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    n_rows, n_cols = w.shape
    if n_rows > EXACT_SEARCH_LIMIT or n_cols > EXACT_SEARCH_LIMIT:
        raise ParameterError(
            f"exact search is limited to {EXACT_SEARCH_LIMIT}x{EXACT_SEARCH_LIMIT}, "
            f"got {n_rows}x{n_cols}"
        )
    candidates = []
    for side, n, count in (("input", n_rows, k), ("output", n_cols, d)):
        options = list(_ordered_factorizations(n, count))
        if not options:
            raise InfeasibleFactorizationError(n, count, side)
        candidates.append(options)
    best_key, best_plan = None, None
    for ins in candidates[0]:
        for outs in candidates[1]:
            params = tt_param_count(tt_svd(w.reshape(ins + outs), epsilon))
            key = (params, sum(ins) + sum(outs), ins, outs)
            if best_key is None or key < best_key:
                best_key, best_plan = key, FoldPlan(ins, outs)
    return best_plan
