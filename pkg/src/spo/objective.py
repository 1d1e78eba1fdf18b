"""Primal and dual objectives of the l1-regularized sample-average problem.

With price relatives ``X`` (n periods by d assets) the primal is

    P(w) = -(1/n) sum_i u(X_i . w) + lam * ||w||_1,   w >= 0,

and the dual, over ``theta`` with ``max_j max(X_j . theta, 0) <= 1``, is

    D(theta) = (1/n) sum_i u*(n * lam * theta_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from spo.errors import DataError, DomainError, ParameterError
from spo.utility import UtilitySpec


@dataclass(frozen=True, eq=False)
class PriceRelativeMatrix:
    """Gross per-period price relatives, rows are periods and columns assets."""

    values: np.ndarray
    column_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.array(self.values, dtype=float, ndmin=2)
        if X.ndim != 2 or X.size == 0:
            raise DataError(f"price relatives must be a non-empty 2-d array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("price relatives contain non-finite entries")
        if np.any(X <= 0):
            raise DataError("price relatives must be strictly positive")
        X.setflags(write=False)
        norms = np.linalg.norm(X, axis=0)
        norms.setflags(write=False)
        object.__setattr__(self, "values", X)
        object.__setattr__(self, "column_norms", norms)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def eta_min(self) -> float:
        return float(self.values.min())


def as_price_relatives(X) -> PriceRelativeMatrix:
    return X if isinstance(X, PriceRelativeMatrix) else PriceRelativeMatrix(X)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    data: PriceRelativeMatrix
    utility: UtilitySpec
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "data", as_price_relatives(self.data))
        if not self.lam > 0:
            raise ParameterError(f"lambda must be > 0, got {self.lam}")

    @property
    def X(self) -> np.ndarray:
        return self.data.values


class DualValue(NamedTuple):
    """Dual objective value; ``value`` is meaningless when not ``feasible``."""

    value: float
    feasible: bool


def _as_weights(w, d):
    w = np.asarray(w, dtype=float)
    if w.shape != (d,):
        raise ParameterError(f"weights must have shape ({d},), got {w.shape}")
    return w


def empirical_loss(spec: ProblemSpec, w) -> float:
    """``h(w) = -(1/n) sum_i u(X_i . w)``."""
    w = _as_weights(w, spec.data.d)
    return float(-np.mean(spec.utility.value(spec.X @ w)))


def loss_gradient(spec: ProblemSpec, w, active=None) -> np.ndarray:
    """Gradient of the empirical loss, evaluated on ``active`` coordinates only.

    Entries outside ``active`` are left at zero.
    """
    w = _as_weights(w, spec.data.d)
    X = spec.X
    du = spec.utility.grad(X @ w)
    grad = np.zeros(spec.data.d)
    if active is None:
        grad[:] = -(X.T @ du) / spec.data.n
    else:
        active = np.asarray(active, dtype=np.intp)
        grad[active] = -(X[:, active].T @ du) / spec.data.n
    return grad


def lambda_max(data, utility: UtilitySpec) -> float:
    """Smallest regularization level whose solution is identically zero."""
    data = as_price_relatives(data)
    utility.require_solver_ready()
    return float(utility.grad(0.0) * data.values.mean(axis=0).max())


def primal_value(spec: ProblemSpec, w) -> float:
    w = _as_weights(w, spec.data.d)
    return empirical_loss(spec, w) + spec.lam * float(np.abs(w).sum())


def step_lipschitz(data, utility: UtilitySpec) -> float:
    """Lipschitz constant of the loss gradient on the nonnegative orthant.

    Equals ``|u''(0)| / n * ||X||_2^2``; the spectral norm comes from the
    eigenvalues of whichever Gram matrix is smaller.
    """
    data = as_price_relatives(data)
    X = data.values
    gram = X @ X.T if data.n <= data.d else X.T @ X
    sq_norm = float(np.linalg.eigvalsh(gram)[-1])
    return -float(utility.hess(0.0)) * sq_norm / data.n


def dual_scaling(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Rescale ``z`` into ``{theta : max_j max(X_j . theta, 0) <= 1}``."""
    denom = max(float(np.max(X.T @ z, initial=0.0)), 1.0)
    return z / denom


def dual_point_from_primal(spec: ProblemSpec, w) -> np.ndarray:
    """Feasible dual point linked to ``w``: the rescaled ``u'(Xw) / (n*lam)``."""
    w = _as_weights(w, spec.data.d)
    z = spec.utility.grad(spec.X @ w) / (spec.data.n * spec.lam)
    return dual_scaling(spec.X, z)


def is_dual_feasible(spec: ProblemSpec, theta, atol: float = 1e-12) -> bool:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.data.n,) or np.any(theta <= 0):
        return False
    return float(np.max(spec.X.T @ theta)) <= 1.0 + atol


def dual_value(spec: ProblemSpec, theta) -> DualValue:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.data.n,):
        raise ParameterError(f"dual point must have shape ({spec.data.n},), got {theta.shape}")
    if np.any(theta <= 0) or not np.all(np.isfinite(theta)):
        return DualValue(float("nan"), False)
    n = spec.data.n
    return DualValue(float(np.mean(spec.utility.conjugate(n * spec.lam * theta))), True)


def duality_gap(spec: ProblemSpec, w, theta, atol: float = 1e-12) -> float:
    w = _as_weights(w, spec.data.d)
    if np.any(w < 0):
        raise DomainError("primal point has negative entries")
    if not is_dual_feasible(spec, theta, atol=atol):
        raise DomainError("dual point is infeasible")
    dual = dual_value(spec, theta)
    return primal_value(spec, w) - dual.value
