"""Saten layers: a TT-parameterized weight plus a sparse residual correction.

A weight ``W`` of shape ``(N, M)`` acts as ``y = W^T x``. Compression folds
``W`` into an order-(k+d) tensor (input modes first), decomposes it with an
error-bounded TT-SVD and keeps a masked part of the residual
``W - W_TT``. Inference and training never rebuild ``W``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .shape_opt import FoldPlan, plan_fold_with_fallback
from .sparsity import (
    SparseResidual,
    TokenFrequencyTable,
    empty_residual,
    mask_rows,
    mask_two_four,
    mask_unstructured,
)
from .tensor_core import MulCounter, as_tensor, fold
from .tt import (
    TTRepresentation,
    matricize,
    reconstruct,
    truncation_rank,
    tt_mac_count,
    tt_matvec,
    tt_matvec_vjp,
    tt_param_count,
    tt_svd,
)

UNSTRUCTURED = "unstructured"
TWO_FOUR = "two_four"
ROW = "row"
PATTERNS = (UNSTRUCTURED, TWO_FOUR, ROW)
_ALIASES = {"u": UNSTRUCTURED, "2:4": TWO_FOUR, "rows": ROW}


def normalize_pattern(pattern: str) -> str:
    name = _ALIASES.get(pattern, pattern)
    if name not in PATTERNS:
        raise ParameterError(f"unknown sparsity pattern {pattern!r}")
    return name


@dataclass(frozen=True)
class SatenLayer:
    fold_plan: FoldPlan
    tt: TTRepresentation
    residual: SparseResidual
    epsilon: float
    pattern: str
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.tt.mode_sizes != self.fold_plan.mode_sizes:
            raise ShapeError(
                f"TT modes {self.tt.mode_sizes} do not match fold plan {self.fold_plan}"
            )
        if self.residual.shape != (self.fold_plan.n_rows, self.fold_plan.n_cols):
            raise ShapeError(
                f"residual shape {self.residual.shape} does not match fold plan {self.fold_plan}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.fold_plan.n_rows, self.fold_plan.n_cols)

    def tt_matrix(self) -> np.ndarray:
        return matricize(reconstruct(self.tt), self.fold_plan.k)

    def dense_weight(self) -> np.ndarray:
        """Densified ``W_TT + E`` (for checks; not used on the inference path)."""
        return self.tt_matrix() + self.residual.to_dense()


@dataclass(frozen=True)
class LayerGradients:
    core_grads: tuple[np.ndarray, ...]
    sparse_value_grads: np.ndarray


@dataclass(frozen=True)
class CostReport:
    params_tt: int
    params_sparse: int
    params_total: int
    density: float
    mac_tt: int
    mac_saten: int
    dense_params: int
    dense_macs: int
    compression_ratio: float
    storage_bytes: int
    notes: tuple[str, ...] = ()

    @property
    def mac_reduction(self) -> float:
        return self.dense_macs / self.mac_saten

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["notes"] = list(self.notes)
        out["mac_reduction"] = self.mac_reduction
        return out


def _make_residual(residual, pattern, budget, freq):
    n_rows, n_cols = residual.shape
    if pattern == UNSTRUCTURED:
        if budget is None:
            raise ParameterError("unstructured pattern needs a density budget")
        return mask_unstructured(residual, float(budget))
    if pattern == TWO_FOUR:
        if budget is None or float(budget) == 0.5:
            return mask_two_four(residual)
        if float(budget) == 0.0:
            return empty_residual(n_rows, n_cols)
        raise ParameterError(f"2:4 pattern has fixed density 0.5 (or 0 to disable), got {budget}")
    if freq is None:
        raise ParameterError("row pattern needs a token frequency table")
    if budget is None:
        raise ParameterError("row pattern needs a top_t budget")
    return mask_rows(residual, freq, int(budget))


def compress(
    w: np.ndarray,
    epsilon: float,
    pattern: str = UNSTRUCTURED,
    sparsity_budget: float | int | None = None,
    freq: TokenFrequencyTable | None = None,
    k: int | None = None,
    d: int | None = None,
) -> SatenLayer:
    """Compress one weight matrix into a :class:`SatenLayer`.

    ``sparsity_budget`` is a density for the unstructured pattern, a number
    of kept rows (``top_t``) for the row pattern, and 0.5 (default) or 0 for
    the 2:4 pattern. A zero budget always leaves the residual empty.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a weight matrix, got shape {w.shape}")
    pattern = normalize_pattern(pattern)
    if pattern == ROW and freq is None:
        raise ParameterError("row pattern needs a token frequency table")
    plan, notes = plan_fold_with_fallback(w.shape[0], w.shape[1], k, d)
    tt = tt_svd(fold(w, plan.mode_sizes), epsilon)
    residual = w - matricize(reconstruct(tt), plan.k)
    sparse = _make_residual(residual, pattern, sparsity_budget, freq)
    return SatenLayer(plan, tt, sparse, float(epsilon), pattern, tuple(notes))


def _check_x(layer: SatenLayer, x) -> np.ndarray:
    x = as_tensor(x).reshape(-1)
    if x.size != layer.fold_plan.n_rows:
        raise ShapeError(f"input length {x.size} != layer input size {layer.fold_plan.n_rows}")
    return x


def forward(layer: SatenLayer, x: np.ndarray, counter: MulCounter | None = None) -> np.ndarray:
    """``y = E^T x + TT(x)`` evaluated in the compressed format."""
    x = _check_x(layer, x)
    y = tt_matvec(x.reshape(layer.fold_plan.input_factors), layer.tt, counter)
    return y + layer.residual.matvec_t(x, counter)


def backward(
    layer: SatenLayer, x: np.ndarray, upstream_grad: np.ndarray
) -> tuple[LayerGradients, np.ndarray]:
    """Gradients of ``<upstream_grad, forward(layer, x)>``.

    Returns gradients for every core, every stored residual value, and ``x``.
    """
    x = _check_x(layer, x)
    g = as_tensor(upstream_grad).reshape(-1)
    if g.size != layer.fold_plan.n_cols:
        raise ShapeError(f"upstream gradient length {g.size} != layer output size {layer.fold_plan.n_cols}")
    core_grads, gx = tt_matvec_vjp(x.reshape(layer.fold_plan.input_factors), layer.tt, g)
    rows, cols = layer.residual.positions()
    sparse_grads = x[rows] * g[cols]
    gx = gx.reshape(-1) + layer.residual.matvec(g)
    return LayerGradients(tuple(core_grads), sparse_grads), gx


def sgd_step(layer: SatenLayer, grads: LayerGradients, lr: float) -> SatenLayer:
    """One plain gradient step; the residual support stays frozen."""
    if len(grads.core_grads) != layer.tt.order:
        raise ShapeError("gradient does not match the number of cores")
    cores = []
    for core, grad in zip(layer.tt.cores, grads.core_grads):
        if grad.shape != core.shape:
            raise ShapeError(f"core gradient shape {grad.shape} != core shape {core.shape}")
        cores.append(core - lr * grad)
    values = layer.residual.values - lr * np.asarray(grads.sparse_value_grads).reshape(-1)
    return dataclasses.replace(
        layer, tt=TTRepresentation(tuple(cores)), residual=layer.residual.with_values(values)
    )


def regression_loss(layer: SatenLayer, x: np.ndarray, y: np.ndarray) -> float:
    """``0.5 * mean_s ||forward(x_s) - y_s||^2``."""
    preds = np.stack([forward(layer, xi) for xi in x])
    return 0.5 * float(np.mean(np.sum((preds - y) ** 2, axis=1)))


def regression_step(layer: SatenLayer, x: np.ndarray, y: np.ndarray, lr: float) -> SatenLayer:
    core_acc = None
    sparse_acc = None
    for xi, yi in zip(x, y):
        grads, _ = backward(layer, xi, (forward(layer, xi) - yi) / len(x))
        if core_acc is None:
            core_acc = [g.copy() for g in grads.core_grads]
            sparse_acc = grads.sparse_value_grads.copy()
        else:
            for acc, g in zip(core_acc, grads.core_grads):
                acc += g
            sparse_acc += grads.sparse_value_grads
    return sgd_step(layer, LayerGradients(tuple(core_acc), sparse_acc), lr)


def cost_report(layer: SatenLayer) -> CostReport:
    n_rows, n_cols = layer.shape
    params_tt = tt_param_count(layer.tt)
    params_sparse = layer.residual.nnz
    mac_tt = tt_mac_count(layer.tt, layer.fold_plan.k)
    total = params_tt + params_sparse
    return CostReport(
        params_tt=params_tt,
        params_sparse=params_sparse,
        params_total=total,
        density=layer.residual.density(),
        mac_tt=mac_tt,
        # (rho N + 1) M == nnz + M exactly, since rho = nnz / (N M)
        mac_saten=mac_tt + params_sparse + n_cols,
        dense_params=n_rows * n_cols,
        dense_macs=n_cols * (n_rows + 1),
        compression_ratio=n_rows * n_cols / total if total else math.inf,
        storage_bytes=4 * params_tt + layer.residual.storage_bytes(),
        notes=layer.notes,
    )


@dataclass(frozen=True)
class SvdFactors:
    """``W ~= left @ right`` with ``left = U S`` (N x r) and ``right = V^T`` (r x M)."""

    left: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def to_dense(self) -> np.ndarray:
        return self.left @ self.right


def svd_baseline_compress(w: np.ndarray, epsilon: float) -> tuple[SvdFactors, CostReport]:
    """Smallest-rank truncated SVD with relative Frobenius error <= ``epsilon``."""
    w = as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    if epsilon < 0:
        raise ParameterError(f"epsilon must be non-negative, got {epsilon}")
    n_rows, n_cols = w.shape
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    r = truncation_rank(s, epsilon * float(np.linalg.norm(s)))
    factors = SvdFactors(u[:, :r] * s[:r], vt[:r].copy())
    params = r * (n_rows + n_cols)
    report = CostReport(
        params_tt=params,
        params_sparse=0,
        params_total=params,
        density=0.0,
        mac_tt=params,
        mac_saten=params + n_cols,
        dense_params=n_rows * n_cols,
        dense_macs=n_cols * (n_rows + 1),
        compression_ratio=n_rows * n_cols / params,
        storage_bytes=4 * params,
    )
    return factors, report
