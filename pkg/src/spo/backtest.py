"""Rolling-window out-of-sample evaluation of allocation strategies."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from spo.data import MarketPanel, clip_quantiles, compute_factor, factor_inputs, filter_universe, to_price_relatives
from spo.errors import DataError, ParameterError
from spo.objective import PriceRelativeMatrix, ProblemSpec, lambda_max
from spo.portfolio import (
    Metrics,
    equally_weighted,
    gmv_sample,
    metrics,
    mv_sample,
    net_returns,
    time_series_cv,
)
from spo.solver import (
    CV_CONFIG,
    FINAL_CONFIG,
    SolverConfig,
    default_grid,
    select_by_cardinality,
    solve,
    solve_path,
)
from spo.utility import Family, UtilitySpec
from spo.weights import PortfolioWeights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BacktestConfig:
    train_window: int = 120
    hold_window: int = 63
    cv_folds: int = 5
    n_lambdas: int = 100
    lambda_decades: float = 2.0
    mv_grid: tuple = tuple(np.logspace(-3, 2, 100))
    fee_rate: float = 0.001
    activity_fee: float = 0.00001
    n_min: int | None = None
    cardinality: int | None = None
    clip_q: float | None = None
    factor: str | None = None
    factor_eps: float = 0.01
    start: int | None = None
    cv_solver: SolverConfig = CV_CONFIG
    final_solver: SolverConfig = FINAL_CONFIG

    def __post_init__(self):
        if self.train_window < 1 or self.hold_window < 1:
            raise ParameterError("windows must be >= 1")
        if self.fee_rate < 0 or self.activity_fee < 0:
            raise ParameterError("fees must be >= 0")
        if self.factor not in (None, "sr", "rsi"):
            raise ParameterError(f"unknown factor {self.factor!r}")
        if self.cardinality is not None and self.cardinality < 1:
            raise ParameterError("cardinality must be >= 1")
        if self.n_min is not None and self.n_min < 1:
            raise ParameterError("n_min must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mv_grid"] = [float(v) for v in self.mv_grid]
        return out


@dataclass(frozen=True, eq=False)
class Allocation:
    weights: PortfolioWeights
    hyper: float | None = None
    note: str = ""


# -- strategies --------------------------------------------------------------


class EqualWeight:
    name = "EW"

    def allocate(self, X_fit, X_eval, cfg: BacktestConfig) -> Allocation:
        return Allocation(equally_weighted(X_fit.shape[1]))


class MinimumVariance:
    name = "GMV-P"

    def allocate(self, X_fit, X_eval, cfg: BacktestConfig) -> Allocation:
        res = gmv_sample(X_fit)
        return Allocation(res.weights, note="" if res.converged else "qp not converged")


class MeanVariance:
    """Sample mean-variance portfolio with ``lambda_mv`` chosen by time-series CV.

    The validation score is the realized mean return minus ``lambda_mv``
    times the realized variance of the portfolio.
    """

    name = "MV-P"

    def fit_path(self, X_train, grid):
        return [mv_sample(X_train, lam).weights for lam in grid]

    def score(self, w, X_val, lam):
        r = np.asarray(X_val) @ np.asarray(w) - 1.0
        return float(r.mean() - lam * r.var())

    def allocate(self, X_fit, X_eval, cfg: BacktestConfig) -> Allocation:
        lam, _ = time_series_cv(self, X_fit, cfg.mv_grid, cfg.cv_folds, X_eval=X_eval)
        res = mv_sample(X_fit, lam)
        return Allocation(res.weights, lam, "" if res.converged else "qp not converged")


class ExpectedUtility:
    """The l1-regularized sample-average utility maximizer.

    ``eta=None`` for the log family sets the shift to the smallest model
    input of each training window. lambda is chosen by CV on realized
    utility unless a cardinality cap picks it from the path directly.
    """

    def __init__(self, family="log", eta: float | None = None, a: float = 1.0):
        self.family = Family(family)
        self.eta = eta
        self.a = a

    @property
    def name(self) -> str:
        return "LOG" if self.family is Family.LOG else f"EXP-{self.a:.2f}"

    def utility_for(self, X) -> UtilitySpec:
        if self.family is Family.LOG:
            eta = float(np.min(X)) if self.eta is None else self.eta
            return UtilitySpec.log(eta)
        return UtilitySpec.exp(self.a, 0.0 if self.eta is None else self.eta)

    def bind(self, utility: UtilitySpec, config: SolverConfig):
        self._utility, self._config = utility, config
        return self

    def fit_path(self, X_train, grid):
        path = solve_path(X_train, self._utility, grid, self._config)
        return [r.weights for r in path.results]

    def score(self, w, X_val, lam):
        wealth = np.asarray(X_val) @ np.asarray(w)
        return float(np.mean(self._utility.value(wealth)))

    def allocate(self, X_fit, X_eval, cfg: BacktestConfig) -> Allocation:
        X_fit = PriceRelativeMatrix(X_fit)
        util = self.utility_for(X_fit.values)
        grid = default_grid(lambda_max(X_fit, util), cfg.n_lambdas, cfg.lambda_decades)

        if cfg.cardinality is not None:
            path = solve_path(X_fit, util, grid, cfg.final_solver)
            res = select_by_cardinality(path, s=cfg.cardinality)
            return Allocation(res.weights, res.lam, "" if res.selection_met else "cardinality not met")

        self.bind(util, cfg.cv_solver)
        lam, _ = time_series_cv(self, X_fit.values, grid, cfg.cv_folds, X_eval=X_eval)
        res = solve(_problem(X_fit, util, lam), cfg.final_solver)
        note = "" if res.converged else "solver hit max_iter"
        if cfg.n_min is not None and res.support_size < cfg.n_min:
            below = grid[grid <= lam]
            path = solve_path(X_fit, util, below, cfg.final_solver)
            res = select_by_cardinality(path, n_min=cfg.n_min)
            note = "" if res.selection_met else "n_min not met"
        return Allocation(res.weights, float(res.lam), note)


def _problem(X, util, lam):
    return ProblemSpec(X, util, float(lam))


def make_strategy(name: str):
    """Build a strategy from ``EW``, ``GMV-P``, ``MV-P``, ``LOG`` or ``EXP-<a>``."""
    key = name.strip().upper()
    if key == "EW":
        return EqualWeight()
    if key in ("GMV-P", "GMV"):
        return MinimumVariance()
    if key in ("MV-P", "MV"):
        return MeanVariance()
    if key == "LOG" or key.startswith("LOG-"):
        eta = float(key[4:]) if key.startswith("LOG-") else None
        return ExpectedUtility("log", eta=eta)
    if key.startswith("EXP-"):
        try:
            a = float(key[4:])
        except ValueError:
            raise ParameterError(f"bad risk aversion in {name!r}") from None
        return ExpectedUtility("exp", a=a)
    raise ParameterError(f"unknown strategy {name!r}")


# -- the rebalancing loop ------------------------------------------------------


@dataclass(eq=False)
class BacktestReport:
    strategy: str
    dates: np.ndarray
    gross: np.ndarray
    net: np.ndarray
    risk_free: np.ndarray
    holdings: np.ndarray  # one row per period, columns are panel tickers
    tickers: tuple
    rebalance_dates: list
    hyper: list
    supports: list
    periods_per_year: int
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def avg_num_assets(self) -> float:
        return float(np.mean(self.supports)) if self.supports else 0.0

    @property
    def metrics_gross(self) -> Metrics:
        return metrics(self.gross, self.risk_free, self.periods_per_year)

    @property
    def metrics_net(self) -> Metrics:
        return metrics(self.net, self.risk_free, self.periods_per_year)

    def summary(self) -> dict:
        gross = self.metrics_gross.as_dict() if len(self.gross) else None
        net = self.metrics_net.as_dict() if len(self.net) else None
        return {
            "strategy": self.strategy,
            "periods": int(len(self.gross)),
            "rebalances": len(self.rebalance_dates),
            "avg_num_assets": self.avg_num_assets,
            "gross": gross,
            "net": net,
            "risk_free_supplied": bool(self.config.get("risk_free_supplied", False)),
            "warnings": list(self.warnings),
            "config": self.config,
        }

    def ledger(self):
        """``(date, ticker, weight)`` rows for every nonzero holding at each rebalance."""
        rows = []
        for date, w in zip(self.rebalance_dates, self._rebalance_holdings()):
            for j in np.flatnonzero(w):
                rows.append((date, self.tickers[j], float(w[j])))
        return rows

    def _rebalance_holdings(self):
        idx = np.searchsorted(self.dates, np.array(self.rebalance_dates, dtype="datetime64[D]"))
        return [self.holdings[i] for i in idx]


def _rebalance_task(args):
    panel, strategy, cfg, t, factor_panel = args
    return _allocate_at(panel, strategy, cfg, t, factor_panel)


def _allocate_at(panel: MarketPanel, strategy, cfg: BacktestConfig, t: int, factor_panel):
    """Allocation chosen at row ``t`` from rows strictly before ``t``."""
    window = (t - cfg.train_window, t)
    subset = filter_universe(panel, t - 1, cfg.train_window)
    if factor_panel is not None and len(subset):
        ok = ~np.isnan(factor_panel.values[window[0]:window[1]][:, subset]).any(axis=0)
        subset = subset[ok]
    if len(subset) == 0:
        return subset, None
    X_eval = to_price_relatives(panel, subset, window)
    X_fit = X_eval
    if factor_panel is not None:
        X_fit = factor_inputs(factor_panel, subset, window, cfg.factor_eps)
    if cfg.clip_q is not None:
        X_fit = clip_quantiles(X_fit, cfg.clip_q)
    alloc = strategy.allocate(X_fit.values, X_eval.values, cfg)
    return subset, alloc


def backtest(panel: MarketPanel, strategy, cfg: BacktestConfig | None = None, threads: int = 1) -> BacktestReport:
    """Rebalance every ``hold_window`` rows using the preceding ``train_window`` rows.

    Weights stay fixed over each holding window. Missing returns of held
    assets count as zero. A rebalance whose universe is empty is skipped
    and its holding window left out of the series.
    """
    cfg = cfg or BacktestConfig()
    if isinstance(strategy, str):
        strategy = make_strategy(strategy)
    start = cfg.train_window if cfg.start is None else cfg.start
    if start < cfg.train_window:
        raise ParameterError("start leaves less than train_window rows of history")
    if panel.n < start + 1:
        raise ParameterError(
            f"panel has {panel.n} rows, need more than {start} for one holding period"
        )
    points = list(range(start, panel.n, cfg.hold_window))
    factor_panel = compute_factor(panel, cfg.factor) if cfg.factor else None

    tasks = [(panel, strategy, cfg, t, factor_panel) for t in points]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_rebalance_task, tasks))
    else:
        outcomes = [_rebalance_task(task) for task in tasks]

    ret = np.where(panel.availability, panel.returns, 0.0)
    rf_all = panel.risk_free if panel.risk_free is not None else np.zeros(panel.n)
    rows, holdings, gross = [], [], []
    rebalance_dates, hyper, supports, warnings = [], [], [], []
    for t, (subset, alloc) in zip(points, outcomes):
        stop = min(t + cfg.hold_window, panel.n)
        date = str(panel.dates[t])
        if alloc is None:
            warnings.append(f"{date}: empty universe, holding period skipped")
            continue
        w = np.zeros(panel.d)
        w[subset] = alloc.weights.weights
        if alloc.weights.degenerate:
            warnings.append(f"{date}: strategy selected no assets, holding cash")
        if alloc.note:
            warnings.append(f"{date}: {alloc.note}")
        rebalance_dates.append(date)
        hyper.append(alloc.hyper)
        supports.append(alloc.weights.size)
        for i in range(t, stop):
            rows.append(i)
            holdings.append(w)
            gross.append(float(ret[i] @ w))

    holdings = np.array(holdings).reshape(len(rows), panel.d)
    gross = np.array(gross)
    net = net_returns(gross, holdings, cfg.fee_rate, cfg.activity_fee) if len(rows) else gross.copy()
    config = {"strategy": strategy.name, **cfg.to_dict(), "risk_free_supplied": panel.risk_free is not None}
    if panel.risk_free is None:
        warnings.append("no risk-free series supplied; excess returns use rf = 0")
    return BacktestReport(
        strategy=strategy.name,
        dates=panel.dates[rows] if rows else panel.dates[:0],
        gross=gross,
        net=net,
        risk_free=rf_all[rows] if rows else np.zeros(0),
        holdings=holdings,
        tickers=panel.tickers,
        rebalance_dates=rebalance_dates,
        hyper=hyper,
        supports=supports,
        periods_per_year=panel.periods_per_year,
        warnings=warnings,
        config=config,
    )


def _fmt(x) -> str:
    return repr(float(x))


def write_report(report: BacktestReport, out_dir, extra_config: dict | None = None) -> dict:
    """Write ``summary.json``, ``returns.csv`` and ``holdings.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if extra_config:
        summary["run_config"] = extra_config
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    with open(out / "returns.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", "gross", "net", "rf"])
        for date, g, n_, rf in zip(report.dates, report.gross, report.net, report.risk_free):
            wr.writerow([str(date), _fmt(g), _fmt(n_), _fmt(rf)])
    with open(out / "holdings.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", "ticker", "weight"])
        for date, ticker, weight in report.ledger():
            wr.writerow([date, ticker, _fmt(weight)])
    return summary


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj).__name__}")
