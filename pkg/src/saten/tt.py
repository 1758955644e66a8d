"""Tensor-train decomposition, reconstruction and the TT matvec network."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor_core import MulCounter, as_tensor, contract, contract_vjp, frobenius_norm


@dataclass(frozen=True)
class TTRepresentation:
    """A chain of order-3 cores; core ``j`` has shape ``(r[j], s[j], r[j+1])``."""

    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        cores = tuple(as_tensor(c) for c in self.cores)
        object.__setattr__(self, "cores", cores)
        if not cores:
            raise ShapeError("a TT needs at least one core")
        for j, c in enumerate(cores):
            if c.ndim != 3:
                raise ShapeError(f"core {j} has order {c.ndim}, expected 3")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ShapeError("boundary ranks must be 1")
        for j in range(len(cores) - 1):
            if cores[j].shape[2] != cores[j + 1].shape[0]:
                raise ShapeError(
                    f"rank mismatch between core {j} ({cores[j].shape}) and "
                    f"core {j + 1} ({cores[j + 1].shape})"
                )

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def order(self) -> int:
        return len(self.cores)

    def with_cores(self, cores: Sequence[np.ndarray]) -> "TTRepresentation":
        return TTRepresentation(tuple(cores))


def zeros_tt(mode_sizes: Sequence[int]) -> TTRepresentation:
    return TTRepresentation(tuple(np.zeros((1, int(s), 1)) for s in mode_sizes))


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # Make the largest-magnitude entry of every left singular vector positive.
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    vt *= signs[:, None]


def truncation_rank(singular_values: np.ndarray, threshold: float) -> int:
    """Smallest rank ``r >= 1`` whose discarded tail has norm <= ``threshold``."""
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    # tail[r] = sqrt(sum(s[r:] ** 2)) for r = 0..len(s)
    tail = np.sqrt(np.concatenate([np.cumsum(s2[::-1])[::-1], [0.0]]))
    ok = np.nonzero(tail[1:] <= threshold)[0]
    return int(ok[0]) + 1 if ok.size else len(s2)


def tt_svd(w: np.ndarray, epsilon: float) -> TTRepresentation:
    """Error-bounded TT-SVD.

    Performs successive truncated SVDs on the unfoldings of ``w``. Each step
    discards a tail of norm at most ``epsilon / sqrt(t - 1) * ||w||_F``, so the
    relative Frobenius error of the result never exceeds ``epsilon``.
    """
    w = as_tensor(w)
    if epsilon < 0:
        raise ParameterError(f"epsilon must be non-negative, got {epsilon}")
    if w.ndim < 2:
        raise ShapeError(f"tt_svd needs a tensor of order >= 2, got shape {w.shape}")
    shape = w.shape
    t = len(shape)
    norm = frobenius_norm(w)
    if norm == 0.0:
        return zeros_tt(shape)
    delta = epsilon / math.sqrt(t - 1) * norm

    cores = []
    rank = 1
    rest = w
    for j in range(t - 1):
        mat = rest.reshape(rank * shape[j], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        # singular values at roundoff level are not rank, even when epsilon = 0
        floor = s[0] * max(mat.shape) * np.finfo(np.float64).eps
        r = min(truncation_rank(s, delta), max(1, int(np.count_nonzero(s > floor))))
        u, s, vt = u[:, :r].copy(), s[:r], vt[:r].copy()
        _fix_signs(u, vt)
        cores.append(u.reshape(rank, shape[j], r))
        rest = s[:, None] * vt
        rank = r
    cores.append(rest.reshape(rank, shape[-1], 1))
    return TTRepresentation(tuple(cores))


def reconstruct(tt: TTRepresentation) -> np.ndarray:
    """Contract the full chain back into a dense tensor of shape ``mode_sizes``."""
    out = tt.cores[0]
    for core in tt.cores[1:]:
        out = contract(out, core, [(out.ndim - 1, 0)])
    return out.reshape(tt.mode_sizes)


def matricize(w: np.ndarray, k: int) -> np.ndarray:
    """Flatten a folded weight into a matrix: first ``k`` modes index rows."""
    w = as_tensor(w)
    return w.reshape(math.prod(w.shape[:k]), -1)


def tt_param_count(tt: TTRepresentation) -> int:
    r = tt.ranks
    return sum(r[j] * s * r[j + 1] for j, s in enumerate(tt.mode_sizes))


def tt_mac_count(tt: TTRepresentation, k: int) -> int:
    """Multiply count of :func:`tt_matvec` with ``k`` input modes.

    Input cores cost ``N r[i-1] r[i] / (n_1 ... n_{i-1})`` each and output
    cores cost ``(m_1 ... m_t) r[k+t-1] r[k+t]``, summed over all output cores.
    """
    t = tt.order
    if not 1 <= k < t:
        raise ParameterError(f"k must satisfy 1 <= k < {t}, got {k}")
    r = tt.ranks
    s = tt.mode_sizes
    n_total = math.prod(s[:k])
    total = 0
    seen = 1
    for i in range(k):
        total += n_total * r[i] * r[i + 1] // seen
        seen *= s[i]
    m_prefix = 1
    for i in range(k, t):
        m_prefix *= s[i]
        total += m_prefix * r[i] * r[i + 1]
    return total


def _run_chain(x: np.ndarray, tt: TTRepresentation, counter=None):
    k = x.ndim
    trace = [x]
    patterns = []
    y = x
    for step, core in enumerate(tt.cores):
        if step == 0:
            pattern = [(0, 1)]
        elif step < k:
            # leading input mode and trailing rank axis against (r, n, r')
            pattern = [(0, 1), (y.ndim - 1, 0)]
        else:
            pattern = [(y.ndim - 1, 0)]
        y = contract(y, core, pattern, counter)
        patterns.append(pattern)
        trace.append(y)
    return trace, patterns


def _check_input(x: np.ndarray, tt: TTRepresentation) -> np.ndarray:
    x = as_tensor(x)
    k = x.ndim
    if not 1 <= k < tt.order:
        raise ShapeError(
            f"input of order {k} cannot drive a TT with {tt.order} cores"
        )
    for axis, (got, want) in enumerate(zip(x.shape, tt.mode_sizes[:k])):
        if got != want:
            raise ShapeError(
                f"input axis {axis} has size {got}, TT input mode {axis} has size {want}"
            )
    return x


def tt_matvec(
    x: np.ndarray, tt: TTRepresentation, counter: MulCounter | None = None
) -> np.ndarray:
    """Compute ``W_TT^T vec(x)`` directly from the cores.

    ``x`` is the input folded to the first ``k = x.ndim`` mode sizes. The
    network absorbs one input core at a time (contracting its mode and rank
    axes), then grows the output modes core by core, and finally flattens the
    ``(1, m_1, ..., m_d, 1)`` result.
    """
    x = _check_input(x, tt)
    trace, _ = _run_chain(x, tt, counter)
    return trace[-1].reshape(-1)


def tt_matvec_vjp(
    x: np.ndarray, tt: TTRepresentation, grad_y: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``<grad_y, tt_matvec(x, tt)>`` w.r.t. the cores and ``x``."""
    x = _check_input(x, tt)
    trace, patterns = _run_chain(x, tt)
    g = np.asarray(grad_y, dtype=np.float64).reshape(trace[-1].shape)
    core_grads = [None] * tt.order
    for step in range(tt.order - 1, -1, -1):
        g, core_grads[step] = contract_vjp(
            trace[step], tt.cores[step], patterns[step], g
        )
    return core_grads, g
