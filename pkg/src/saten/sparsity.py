"""Sparse residual masks and storage formats.

A residual ``E = (W - W_TT) * mask`` is stored in one of three formats:

* ``coordinate`` -- sorted ``(row, col, value)`` triples (unstructured masks),
* ``two_four``   -- two values plus two in-group row offsets per group of four
  consecutive rows in every column,
* ``row_list``   -- complete dense rows for a subset of row indices.

All formats expose their stored values as one flat array in a canonical
order, together with the matching ``(rows, cols)`` positions. The support is
fixed once built; :meth:`SparseResidual.with_values` swaps values only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .tensor_core import MulCounter, as_tensor

COORDINATE = "coordinate"
TWO_FOUR = "two_four"
ROW_LIST = "row_list"
FORMATS = (COORDINATE, TWO_FOUR, ROW_LIST)

VALUE_BYTES = 4
INDEX_BYTES = 4


class SparseResidual:
    """Common behaviour of the three residual formats."""

    format: str
    n_rows: int
    n_cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def values(self) -> np.ndarray:
        raise NotImplementedError

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index of every stored value, in ``values`` order."""
        raise NotImplementedError

    def with_values(self, values: np.ndarray) -> "SparseResidual":
        raise NotImplementedError

    def index_bytes(self) -> int:
        raise NotImplementedError

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def density(self) -> float:
        return self.nnz / (self.n_rows * self.n_cols)

    def storage_bytes(self) -> int:
        return VALUE_BYTES * self.nnz + self.index_bytes()

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows, cols = self.positions()
        out[rows, cols] = self.values
        return out

    def support(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        rows, cols = self.positions()
        mask[rows, cols] = True
        return mask

    def remask(self, dense: np.ndarray) -> "SparseResidual":
        """Same support, values read from ``dense``."""
        dense = as_tensor(dense)
        if dense.shape != self.shape:
            raise ShapeError(f"expected {self.shape}, got {dense.shape}")
        rows, cols = self.positions()
        return self.with_values(dense[rows, cols])

    def matvec_t(self, x: np.ndarray, counter: MulCounter | None = None) -> np.ndarray:
        """``E^T x``, touching stored entries only."""
        x = as_tensor(x).reshape(-1)
        if x.size != self.n_rows:
            raise ShapeError(f"input length {x.size} != residual rows {self.n_rows}")
        rows, cols = self.positions()
        y = np.zeros(self.n_cols)
        np.add.at(y, cols, self.values * x[rows])
        if counter is not None:
            counter.add(self.nnz)
        return y

    def matvec(self, g: np.ndarray) -> np.ndarray:
        """``E g`` (the input-gradient contribution of the residual)."""
        g = as_tensor(g).reshape(-1)
        if g.size != self.n_cols:
            raise ShapeError(f"gradient length {g.size} != residual cols {self.n_cols}")
        rows, cols = self.positions()
        out = np.zeros(self.n_rows)
        np.add.at(out, rows, self.values * g[cols])
        return out


@dataclass(frozen=True, eq=False)
class CoordinateResidual(SparseResidual):
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    coord_values: np.ndarray
    format: str = field(default=COORDINATE, init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        vals = as_tensor(self.coord_values).reshape(-1)
        if not rows.size == cols.size == vals.size:
            raise ShapeError("rows, cols and values must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise ShapeError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise ShapeError("column index out of range")
            linear = rows * self.n_cols + cols
            if np.any(np.diff(linear) <= 0):
                raise ShapeError("coordinate entries must be strictly increasing")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "coord_values", vals)

    @property
    def values(self):
        return self.coord_values

    def positions(self):
        return self.rows, self.cols

    def with_values(self, values):
        return CoordinateResidual(self.n_rows, self.n_cols, self.rows, self.cols, values)

    def index_bytes(self):
        return 2 * INDEX_BYTES * self.nnz


@dataclass(frozen=True, eq=False)
class TwoFourResidual(SparseResidual):
    """Two kept entries per group of four rows, per column.

    ``group_values``/``group_index`` have shape ``(n_rows // 4, 2, n_cols)``;
    indices are row offsets 0..3 within the group, ascending. A trailing
    partial group of ``g`` rows keeps ``ceil(g / 2)`` entries per column in
    ``tail_values``/``tail_index`` of shape ``(ceil(g / 2), n_cols)``.
    """

    n_rows: int
    n_cols: int
    group_values: np.ndarray
    group_index: np.ndarray
    tail_values: np.ndarray
    tail_index: np.ndarray
    format: str = field(default=TWO_FOUR, init=False)

    def __post_init__(self):
        n_groups, rem = divmod(self.n_rows, 4)
        keep_tail = math.ceil(rem / 2)
        gv = as_tensor(self.group_values).reshape(n_groups, 2, self.n_cols)
        gi = np.asarray(self.group_index, dtype=np.uint8).reshape(n_groups, 2, self.n_cols)
        tv = as_tensor(self.tail_values).reshape(keep_tail, self.n_cols)
        ti = np.asarray(self.tail_index, dtype=np.uint8).reshape(keep_tail, self.n_cols)
        if gi.size and (gi.max() > 3 or np.any(gi[:, 0] >= gi[:, 1])):
            raise ShapeError("2:4 in-group indices must be distinct, ascending, in 0..3")
        if ti.size and (ti.max() >= rem or np.any(np.diff(ti.astype(int), axis=0) <= 0)):
            raise ShapeError("2:4 tail indices must be distinct, ascending, in range")
        object.__setattr__(self, "group_values", gv)
        object.__setattr__(self, "group_index", gi)
        object.__setattr__(self, "tail_values", tv)
        object.__setattr__(self, "tail_index", ti)

    @property
    def values(self):
        return np.concatenate([self.group_values.reshape(-1), self.tail_values.reshape(-1)])

    def positions(self):
        n_groups = self.group_index.shape[0]
        base = 4 * np.arange(n_groups)[:, None, None]
        rows = (base + self.group_index).reshape(-1)
        cols = np.broadcast_to(np.arange(self.n_cols), self.group_index.shape).reshape(-1)
        tail_rows = (4 * n_groups + self.tail_index.astype(np.int64)).reshape(-1)
        tail_cols = np.broadcast_to(np.arange(self.n_cols), self.tail_index.shape).reshape(-1)
        return (
            np.concatenate([rows, tail_rows]).astype(np.int64),
            np.concatenate([cols, tail_cols]).astype(np.int64),
        )

    def with_values(self, values):
        values = as_tensor(values).reshape(-1)
        if values.size != self.nnz:
            raise ShapeError(f"expected {self.nnz} values, got {values.size}")
        split = self.group_values.size
        return TwoFourResidual(
            self.n_rows, self.n_cols,
            values[:split], self.group_index, values[split:], self.tail_index,
        )

    def index_bytes(self):
        # 2-bit offsets, four per byte
        return math.ceil(self.nnz / 4)


@dataclass(frozen=True, eq=False)
class RowListResidual(SparseResidual):
    n_rows: int
    n_cols: int
    rows: np.ndarray
    row_values: np.ndarray
    format: str = field(default=ROW_LIST, init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        vals = as_tensor(self.row_values).reshape(rows.size, self.n_cols)
        if rows.size:
            if np.any(np.diff(rows) <= 0):
                raise ShapeError("row indices must be strictly increasing")
            if rows[0] < 0 or rows[-1] >= self.n_rows:
                raise ShapeError("row index out of range")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "row_values", vals)

    @property
    def values(self):
        return self.row_values.reshape(-1)

    def positions(self):
        rows = np.repeat(self.rows, self.n_cols)
        cols = np.tile(np.arange(self.n_cols), self.rows.size)
        return rows, cols

    def with_values(self, values):
        return RowListResidual(self.n_rows, self.n_cols, self.rows, values)

    def matvec_t(self, x, counter=None):
        x = as_tensor(x).reshape(-1)
        if x.size != self.n_rows:
            raise ShapeError(f"input length {x.size} != residual rows {self.n_rows}")
        if counter is not None:
            counter.add(self.nnz)
        return x[self.rows] @ self.row_values

    def index_bytes(self):
        return INDEX_BYTES * self.rows.size


def empty_residual(n_rows: int, n_cols: int) -> CoordinateResidual:
    empty = np.zeros(0)
    return CoordinateResidual(n_rows, n_cols, empty, empty, empty)


@dataclass(frozen=True)
class TokenFrequencyTable:
    """Occurrence count per token id; ``counts[i]`` is the count of id ``i``."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if np.any(counts < 0):
            raise DataError("token counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def vocab_size(self) -> int:
        return int(self.counts.size)

    def most_frequent(self, top_t: int) -> np.ndarray:
        """Ids of the ``top_t`` most frequent tokens; ties go to smaller ids."""
        order = np.lexsort((np.arange(self.vocab_size), -self.counts))
        return np.sort(order[:top_t])


def count_token_frequencies(token_stream: Sequence[int], vocab_size: int) -> TokenFrequencyTable:
    ids = np.asarray(token_stream, dtype=np.int64).reshape(-1)
    bad = np.nonzero((ids < 0) | (ids >= vocab_size))[0]
    if bad.size:
        pos = int(bad[0])
        raise DataError(
            f"token id {int(ids[pos])} at position {pos} is outside vocab of size {vocab_size}"
        )
    return TokenFrequencyTable(np.bincount(ids, minlength=vocab_size))


def read_token_stream(path: str | Path, binary: bool = False) -> np.ndarray:
    """Read token ids: one integer per line, or raw little-endian uint32."""
    path = Path(path)
    if binary:
        raw = path.read_bytes()
        if len(raw) % 4:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of 4")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                ids.append(int(line))
            except ValueError:
                raise DataError(f"{path}:{lineno}: not an integer token id: {line!r}") from None
    return np.asarray(ids, dtype=np.int64)


def _check_matrix(residual) -> np.ndarray:
    residual = as_tensor(residual)
    if residual.ndim != 2:
        raise ShapeError(f"residual must be a matrix, got shape {residual.shape}")
    return residual


def mask_unstructured(residual: np.ndarray, density: float) -> CoordinateResidual:
    """Keep the ``floor(density * N * M)`` largest-magnitude entries.

    Ties prefer the smaller linear index. Exact zeros among the kept entries
    are not stored.
    """
    residual = _check_matrix(residual)
    if not 0.0 <= density <= 1.0:
        raise ParameterError(f"density must be in [0, 1], got {density}")
    n_rows, n_cols = residual.shape
    keep = min(residual.size, math.floor(density * residual.size + 1e-9))
    flat = residual.reshape(-1)
    chosen = np.argsort(-np.abs(flat), kind="stable")[:keep]
    chosen = np.sort(chosen[flat[chosen] != 0.0])
    rows, cols = np.divmod(chosen, n_cols)
    return CoordinateResidual(n_rows, n_cols, rows, cols, flat[chosen])


def _top_per_column(block: np.ndarray, keep: int) -> tuple[np.ndarray, np.ndarray]:
    # block: (..., g, M); keep the `keep` largest |.| along the g axis.
    order = np.argsort(-np.abs(block), axis=-2, kind="stable")[..., :keep, :]
    order = np.sort(order, axis=-2)
    return np.take_along_axis(block, order, axis=-2), order.astype(np.uint8)


def mask_two_four(residual: np.ndarray) -> TwoFourResidual:
    """Keep the 2 largest-magnitude of every 4 consecutive rows in each column."""
    residual = _check_matrix(residual)
    n_rows, n_cols = residual.shape
    n_groups, rem = divmod(n_rows, 4)
    groups = residual[: 4 * n_groups].reshape(n_groups, 4, n_cols)
    gv, gi = _top_per_column(groups, 2)
    tv, ti = _top_per_column(residual[4 * n_groups:], math.ceil(rem / 2))
    return TwoFourResidual(n_rows, n_cols, gv, gi, tv, ti)


def mask_rows(residual: np.ndarray, freq: TokenFrequencyTable, top_t: int) -> RowListResidual:
    """Keep whole residual rows of the ``top_t`` most frequent token ids."""
    residual = _check_matrix(residual)
    n_rows, n_cols = residual.shape
    if freq.vocab_size != n_rows:
        raise ParameterError(
            f"frequency table covers {freq.vocab_size} tokens, residual has {n_rows} rows"
        )
    if not 0 <= top_t <= n_rows:
        raise ParameterError(f"top_t must be in [0, {n_rows}], got {top_t}")
    rows = freq.most_frequent(int(top_t))
    return RowListResidual(n_rows, n_cols, rows, residual[rows])


def sparse_matvec_t(e: SparseResidual, x: np.ndarray, counter: MulCounter | None = None) -> np.ndarray:
    return e.matvec_t(x, counter)


def sparse_param_count(e: SparseResidual) -> int:
    return e.nnz
