from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spo.errors import ParameterError

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True, eq=False)
class PortfolioWeights:
    """Long-only, fully invested allocation.

    ``degenerate`` marks the all-zero vector returned when a solver
    selects no asset at all; it is the only allowed departure from the
    simplex.
    """

    weights: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, ndmin=1)
        if w.ndim != 1:
            raise ParameterError("weights must be a vector")
        if np.any(w < 0):
            raise ParameterError("weights must be nonnegative")
        if self.degenerate:
            if np.any(w != 0):
                raise ParameterError("a degenerate allocation must be all zeros")
        elif abs(w.sum() - 1.0) > SIMPLEX_ATOL:
            raise ParameterError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_raw(cls, w) -> "PortfolioWeights":
        """Normalize a nonnegative vector onto the simplex."""
        w = np.maximum(np.asarray(w, dtype=float), 0.0)
        total = w.sum()
        if total == 0:
            return cls(np.zeros_like(w), degenerate=True)
        return cls(w / total)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.weights))

    def __len__(self):
        return len(self.weights)

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)
