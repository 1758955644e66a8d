"""Synthetic weights of the form ``W = A B + S + noise * Z``.

Construction, all driven by one seeded ``numpy.random.Generator``:

* ``A`` (rows x rank) and ``B`` (rank x cols) are standard normal; the
  product is scaled by ``1 / sqrt(rank)`` so its entries have unit variance.
* ``S`` has exactly ``spikes`` nonzeros at distinct uniformly drawn positions,
  with random signs and magnitudes uniform in ``[1, 2] * max(1, 10 * noise)``.
  Spikes therefore stand out from the noise by at least a factor of 10.
* ``Z`` is standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class SynthParts:
    low_rank: np.ndarray
    spikes: np.ndarray
    noise: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return self.low_rank + self.spikes + self.noise


def synth_parts(
    rows: int, cols: int, rank: int, spikes: int = 0, noise: float = 0.0, seed: int = 0
) -> SynthParts:
    if rows < 1 or cols < 1:
        raise ParameterError("rows and cols must be positive")
    if rank < 0 or spikes < 0 or noise < 0:
        raise ParameterError("rank, spikes and noise must be non-negative")
    if spikes > rows * cols:
        raise ParameterError(f"cannot place {spikes} spikes in a {rows}x{cols} matrix")
    rng = np.random.default_rng(seed)
    if rank:
        a = rng.standard_normal((rows, rank))
        b = rng.standard_normal((rank, cols))
        low = a @ b / np.sqrt(rank)
    else:
        low = np.zeros((rows, cols))
    s = np.zeros(rows * cols)
    where = rng.choice(rows * cols, size=spikes, replace=False)
    scale = max(1.0, 10.0 * noise)
    s[where] = rng.choice([-1.0, 1.0], size=spikes) * rng.uniform(1.0, 2.0, size=spikes) * scale
    z = noise * rng.standard_normal((rows, cols))
    return SynthParts(low, s.reshape(rows, cols), z)


def synth_matrix(
    rows: int, cols: int, rank: int, spikes: int = 0, noise: float = 0.0, seed: int = 0
) -> np.ndarray:
    return synth_parts(rows, cols, rank, spikes, noise, seed).weight
