"""Benchmark allocations, transaction costs, performance metrics and CV folds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from spo.errors import ParameterError, SchemaError
from spo.objective import as_price_relatives
from spo.weights import PortfolioWeights

__all__ = [
    "PortfolioWeights",
    "SimplexQPResult",
    "equally_weighted",
    "project_simplex",
    "solve_simplex_qp",
    "gmv_from_moments",
    "mv_from_moments",
    "gmv_sample",
    "mv_sample",
    "net_returns",
    "Metrics",
    "metrics",
    "max_drawdown",
    "cv_splits",
    "time_series_cv",
]


def equally_weighted(d: int) -> PortfolioWeights:
    if d < 1:
        raise ParameterError("need at least one asset")
    return PortfolioWeights(np.full(d, 1.0 / d))


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and shift)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


@dataclass(frozen=True, eq=False)
class SimplexQPResult:
    weights: PortfolioWeights
    converged: bool
    iterations: int
    kkt_residual: float


def solve_simplex_qp(Q, c=None, tol: float = 1e-8, max_iter: int = 10_000) -> SimplexQPResult:
    """Minimize ``w'Qw + c'w`` over the simplex by accelerated projected gradient.

    The residual is ``||w - P(w - grad/L)||_inf``, the projected-gradient
    step measured in weight units; it is zero exactly at KKT points.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    d = Q.shape[0]
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float)
    if d == 1:
        return SimplexQPResult(PortfolioWeights(np.ones(1)), True, 0, 0.0)
    Q = 0.5 * (Q + Q.T)
    L = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
    if L <= 0:
        L = max(float(np.abs(c).max()), 1.0)

    def grad(x):
        return 2.0 * Q @ x + c

    w = np.full(d, 1.0 / d)
    y, tk = w.copy(), 1.0
    resid = math.inf
    for it in range(1, max_iter + 1):
        w_new = project_simplex(y - grad(y) / L)
        delta = w_new - w
        if np.dot(y - w_new, delta) > 0:
            y, tk = w_new, 1.0
        else:
            tk_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
            y = w_new + ((tk - 1.0) / tk_new) * delta
            tk = tk_new
        w = w_new
        resid = float(np.max(np.abs(w - project_simplex(w - grad(w) / L))))
        if resid <= tol:
            return SimplexQPResult(PortfolioWeights(project_simplex(w)), True, it, resid)
    return SimplexQPResult(PortfolioWeights(project_simplex(w)), False, max_iter, resid)


def gmv_from_moments(cov, **kw) -> SimplexQPResult:
    return solve_simplex_qp(cov, None, **kw)


def mv_from_moments(mean, cov, lambda_mv: float, **kw) -> SimplexQPResult:
    if not lambda_mv > 0:
        raise ParameterError("lambda_mv must be > 0")
    return solve_simplex_qp(lambda_mv * np.asarray(cov, dtype=float), -np.asarray(mean, dtype=float), **kw)


def _sample_moments(X_train):
    X = as_price_relatives(X_train).values
    if X.shape[0] < 2:
        raise ParameterError("need at least two samples for a covariance")
    return X.mean(axis=0) - 1.0, np.atleast_2d(np.cov(X, rowvar=False, ddof=1))


def gmv_sample(X_train, **kw) -> SimplexQPResult:
    """Global minimum-variance portfolio from the sample covariance."""
    _, cov = _sample_moments(X_train)
    return gmv_from_moments(cov, **kw)


def mv_sample(X_train, lambda_mv: float, **kw) -> SimplexQPResult:
    """Mean-variance portfolio ``min -w'mu + lambda_mv * w'Sigma w`` from sample moments."""
    mean, cov = _sample_moments(X_train)
    return mv_from_moments(mean, cov, lambda_mv, **kw)


# -- costs and metrics -------------------------------------------------------


def net_returns(gross, holdings, c: float = 0.001, c_activity: float = 0.00001) -> np.ndarray:
    """Per-period returns after proportional and per-trade fees.

    ``holdings[t]`` is the allocation held during period ``t``; the
    allocation before the first period is taken to be all cash, so the
    initial purchase is charged.
    """
    gross = np.asarray(gross, dtype=float)
    holdings = np.asarray(holdings, dtype=float)
    if holdings.ndim != 2 or holdings.shape[0] != gross.shape[0]:
        raise SchemaError(f"holdings shape {holdings.shape} does not match {gross.shape[0]} periods")
    if c < 0 or c_activity < 0:
        raise ParameterError("fees must be >= 0")
    prev = np.vstack([np.zeros((1, holdings.shape[1])), holdings[:-1]])
    change = holdings - prev
    cost = c * np.abs(change).sum(axis=1) + c_activity * (change != 0).sum(axis=1)
    # equals (1 - cost)(1 + r) - 1, written so that zero cost returns r exactly
    return gross - cost * (1.0 + gross)


def max_drawdown(returns) -> float:
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])
    peak = np.maximum.accumulate(wealth)
    return float(np.max(1.0 - wealth / peak))


@dataclass(frozen=True)
class Metrics:
    """Summary statistics of a return series.

    ``ret`` compounds excess returns and ``ret_total`` raw returns; ``mdd``
    is measured on the raw wealth curve. Undefined ratios are NaN with
    their ``*_defined`` flag cleared.
    """

    ret: float
    ret_total: float
    mdd: float
    sr: float
    sor: float
    sr_defined: bool
    sor_defined: bool
    periods: int

    def as_dict(self) -> dict:
        return {
            "RET": self.ret,
            "RET_total": self.ret_total,
            "MDD": self.mdd,
            "SR": self.sr if self.sr_defined else None,
            "SoR": self.sor if self.sor_defined else None,
            "periods": self.periods,
        }


def metrics(series, risk_free=None, periods_per_year: int = 252) -> Metrics:
    r = np.asarray(series, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ParameterError("need a non-empty 1-d return series")
    rf = np.zeros_like(r) if risk_free is None else np.broadcast_to(np.asarray(risk_free, dtype=float), r.shape)
    excess = r - rf
    ann = math.sqrt(periods_per_year)
    mean = float(excess.mean())

    sd = float(excess.std(ddof=1)) if r.size > 1 else 0.0
    sr_ok = sd > 0
    down = math.sqrt(float(np.mean(np.minimum(excess, 0.0) ** 2)))
    sor_ok = down > 0
    return Metrics(
        ret=float(np.prod(1.0 + excess) - 1.0),
        ret_total=float(np.prod(1.0 + r) - 1.0),
        mdd=max_drawdown(r),
        sr=mean / sd * ann if sr_ok else float("nan"),
        sor=mean / down * ann if sor_ok else float("nan"),
        sr_defined=sr_ok,
        sor_defined=sor_ok,
        periods=int(r.size),
    )


# -- time-series cross-validation --------------------------------------------


def cv_splits(m: int, k: int = 5):
    """Forward-chaining folds over ``m`` ordered samples.

    The samples are cut into ``k + 1`` slices of ``m // (k + 1)`` rows
    measured from the end; fold ``f`` validates on the ``f``-th of the last
    ``k`` slices and trains on everything before it.
    """
    if k < 1:
        raise ParameterError("need k >= 1")
    size = m // (k + 1)
    if size < 1:
        raise ParameterError(f"{m} samples cannot fill {k} folds")
    folds = []
    for start in range(m - k * size, m, size):
        folds.append((np.arange(0, start), np.arange(start, start + size)))
    return folds


def time_series_cv(strategy, X_fit, grid, k: int = 5, scorer=None, X_eval=None):
    """Choose the grid value with the best mean validation score.

    ``strategy.fit_path(X_train, grid)`` returns one allocation per grid
    value; ``scorer(weights, X_val, value)`` (default ``strategy.score``)
    rates each on the validation block of ``X_eval``, which defaults to
    ``X_fit``. Ties go to the earliest grid value.
    """
    grid = list(grid)
    if len(grid) == 0:
        raise ParameterError("empty grid")
    if len(grid) == 1:
        return grid[0], np.zeros(1)
    X_fit = np.asarray(getattr(X_fit, "values", X_fit), dtype=float)
    X_eval = X_fit if X_eval is None else np.asarray(getattr(X_eval, "values", X_eval), dtype=float)
    scorer = scorer or strategy.score
    totals = np.zeros(len(grid))
    folds = cv_splits(X_fit.shape[0], k)
    for train, val in folds:
        allocations = strategy.fit_path(X_fit[train], grid)
        for i, (w, value) in enumerate(zip(allocations, grid)):
            totals[i] += scorer(w, X_eval[val], value)
    means = np.nan_to_num(totals / len(folds), nan=-np.inf)
    best = int(np.argmax(means))  # first maximum
    return grid[best], means
