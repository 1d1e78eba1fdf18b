"""Gap-safe sphere tests for discarding assets before convergence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from spo.errors import ParameterError
from spo.objective import PriceRelativeMatrix
from spo.utility import UtilitySpec


@dataclass(frozen=True, eq=False)
class ScreenState:
    """Partition of the asset indices into screened and active sets."""

    screened: np.ndarray
    active: np.ndarray
    radius: float
    alpha: float

    @classmethod
    def initial(cls, d: int, alpha: float) -> "ScreenState":
        return cls(
            screened=np.empty(0, dtype=np.intp),
            active=np.arange(d, dtype=np.intp),
            radius=math.inf,
            alpha=alpha,
        )

    @property
    def d(self) -> int:
        return len(self.screened) + len(self.active)

    @property
    def ratio(self) -> float:
        return len(self.screened) / self.d if self.d else 0.0


def strong_concavity_alpha(utility: UtilitySpec, lam: float, n: int) -> float:
    """Strong-concavity modulus of the dual objective.

    Each dual term is ``u*(n*lam*theta_i) / n``; its curvature is at least
    ``n * lam**2 / L`` where ``L`` bounds ``|u''|`` over nonnegative wealth.
    """
    if not lam > 0 or n < 1:
        raise ParameterError("need lam > 0 and n >= 1")
    _, lip_grad = utility.lipschitz()
    return n * lam**2 / lip_grad


def safe_radius(gap: float, alpha: float) -> float:
    if not alpha > 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    return math.sqrt(2.0 * max(gap, 0.0) / alpha)


def screen(X, theta, radius: float, state: ScreenState, column_norms=None) -> ScreenState:
    """Move every active asset that passes the sphere test to the screened set.

    Asset ``j`` is discarded when ``max(X_j . theta, 0) + radius * ||X_j|| < 1``.
    """
    if isinstance(X, PriceRelativeMatrix):
        column_norms = X.column_norms if column_norms is None else column_norms
        X = X.values
    X = np.asarray(X, dtype=float)
    if column_norms is None:
        column_norms = np.linalg.norm(X, axis=0)
    active = state.active
    if len(active) == 0:
        return ScreenState(state.screened, active, radius, state.alpha)
    corr = np.maximum(X[:, active].T @ theta, 0.0)
    drop = corr + radius * column_norms[active] < 1.0
    if not drop.any():
        return ScreenState(state.screened, active, radius, state.alpha)
    screened = np.union1d(state.screened, active[drop])
    return ScreenState(screened, active[~drop], radius, state.alpha)
