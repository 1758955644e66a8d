"""Dense tensor primitives: folding, pairwise contraction, norms.

Dense tensors are plain ``numpy.ndarray`` objects in C (row-major) order and
float64 precision. Contractions take an explicit list of ``(axis_a, axis_b)``
pairs and can report the number of scalar multiplications they perform
through a :class:`MulCounter`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeError

Pattern = Sequence[tuple[int, int]]


class MulCounter:
    """Accumulates scalar multiplication counts across contraction calls.

    A counter is owned by the caller and passed down explicitly, so two
    concurrent computations never share one.
    """

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def __repr__(self):
        return f"MulCounter({self.count})"


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def fold(x: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    """Reinterpret ``x`` with ``new_shape`` under row-major ordering."""
    x = as_tensor(x)
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise ShapeError(f"dimension sizes must be >= 1, got {new_shape}")
    if math.prod(new_shape) != x.size:
        raise ShapeError(
            f"cannot fold {x.shape} ({x.size} elements) into {new_shape} "
            f"({math.prod(new_shape)} elements)"
        )
    return x.reshape(new_shape)


def frobenius_norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _normalize_pattern(a: np.ndarray, b: np.ndarray, pattern: Pattern):
    axes_a, axes_b = [], []
    for pa, pb in pattern:
        pa = int(pa) + a.ndim if pa < 0 else int(pa)
        pb = int(pb) + b.ndim if pb < 0 else int(pb)
        if not 0 <= pa < a.ndim:
            raise ShapeError(f"left axis {pa} out of range for shape {a.shape}")
        if not 0 <= pb < b.ndim:
            raise ShapeError(f"right axis {pb} out of range for shape {b.shape}")
        if a.shape[pa] != b.shape[pb]:
            raise ShapeError(
                f"cannot contract left axis {pa} (size {a.shape[pa]}) with "
                f"right axis {pb} (size {b.shape[pb]})"
            )
        axes_a.append(pa)
        axes_b.append(pb)
    if len(set(axes_a)) != len(axes_a):
        raise ShapeError(f"left axis repeated in contraction pattern {list(pattern)}")
    if len(set(axes_b)) != len(axes_b):
        raise ShapeError(f"right axis repeated in contraction pattern {list(pattern)}")
    return axes_a, axes_b


def contract(
    a: np.ndarray,
    b: np.ndarray,
    pattern: Pattern,
    counter: MulCounter | None = None,
) -> np.ndarray:
    """Contract ``a`` and ``b`` over the paired axes in ``pattern``.

    The result carries the free axes of ``a`` (in order) followed by the free
    axes of ``b``. An empty pattern yields the outer product.

    If ``counter`` is given it is incremented by the mathematical number of
    scalar multiplications: (product of output dims) * (product of contracted
    dims).
    """
    a = as_tensor(a)
    b = as_tensor(b)
    axes_a, axes_b = _normalize_pattern(a, b, pattern)
    out = np.tensordot(a, b, axes=(axes_a, axes_b))
    if counter is not None:
        contracted = math.prod(a.shape[i] for i in axes_a)
        counter.add(math.prod(out.shape) * contracted)
    return out


def contract_vjp(
    a: np.ndarray,
    b: np.ndarray,
    pattern: Pattern,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode derivative of :func:`contract`.

    Given the gradient of a scalar loss with respect to ``contract(a, b,
    pattern)``, return the gradients with respect to ``a`` and ``b``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    axes_a, axes_b = _normalize_pattern(a, b, pattern)
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [i for i in range(b.ndim) if i not in axes_b]
    n_fa = len(free_a)
    grad_out = np.asarray(grad_out, dtype=np.float64)

    # d/da: sum grad_out against b over b's free axes.
    # Result axes: free_a, then b's contracted axes in b order.
    ga = np.tensordot(grad_out, b, axes=(list(range(n_fa, grad_out.ndim)), free_b))
    b_contracted = sorted(axes_b)
    src_of = {}
    for pos, ax in enumerate(free_a):
        src_of[ax] = pos
    for pos, bx in enumerate(b_contracted):
        src_of[axes_a[axes_b.index(bx)]] = n_fa + pos
    ga = np.transpose(ga, [src_of[i] for i in range(a.ndim)])

    # d/db: sum a against grad_out over a's free axes.
    # Result axes: a's contracted axes in a order, then free_b.
    gb = np.tensordot(a, grad_out, axes=(free_a, list(range(n_fa))))
    a_contracted = sorted(axes_a)
    src_of = {}
    for pos, ax in enumerate(a_contracted):
        src_of[axes_b[axes_a.index(ax)]] = pos
    for pos, bx in enumerate(free_b):
        src_of[bx] = len(a_contracted) + pos
    gb = np.transpose(gb, [src_of[i] for i in range(b.ndim)])
    return np.ascontiguousarray(ga), np.ascontiguousarray(gb)
