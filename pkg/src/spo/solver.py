"""Proximal gradient descent with gap-safe screening.

The main entry points are :func:`solve` for a single regularization level
and :func:`solve_path` for a descending grid with warm starts.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from spo.errors import NumericalError, ParameterError
from spo.objective import ProblemSpec, as_price_relatives, lambda_max, step_lipschitz
from spo.screening import ScreenState, safe_radius, screen, strong_concavity_alpha
from spo.utility import Family, UtilitySpec
from spo.weights import PortfolioWeights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs.

    ``check_every`` sets how often the duality gap is evaluated (the stopping
    test); screening runs at those checks whose iteration is a multiple of
    ``screen_every``. ``screen_every=None`` disables screening.

    With ``step_size=None`` the step is ``1/L`` for the gradient Lipschitz
    constant ``L``; ``refresh_step`` recomputes ``L`` over the surviving
    columns whenever screening removes some. ``accelerate`` switches to the
    bisection/extrapolation update and ``momentum`` to Nesterov
    extrapolation with gradient-based restarts; they are exclusive.

    ``polish`` tries a Newton solve restricted to the current support
    whenever the support is unchanged between two gap checks; the Newton
    point replaces the iterate only if it is feasible and lowers the gap.
    """

    max_iter: int = 10_000
    tol: float = 1e-5
    screen_every: int | None = 30
    check_every: int = 10
    step_size: float | None = None
    admm_rho: float = 1.0
    admm_max_iter: int = 100
    admm_tol: float = 1e-10
    accelerate: bool = False
    momentum: bool = False
    refresh_step: bool = True
    polish: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ParameterError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ParameterError("tol must be > 0")
        if self.check_every < 1:
            raise ParameterError("check_every must be >= 1")
        if self.screen_every is not None and self.screen_every < 1:
            raise ParameterError("screen_every must be >= 1 or None")
        if self.step_size is not None and not self.step_size > 0:
            raise ParameterError("step_size must be > 0")
        if not self.admm_rho > 0:
            raise ParameterError("admm_rho must be > 0")
        if self.accelerate and self.momentum:
            raise ParameterError("accelerate and momentum are mutually exclusive")

    @property
    def screening(self) -> bool:
        return self.screen_every is not None


# settings used during cross-validation and for the final refit
CV_CONFIG = SolverConfig(max_iter=10_000, tol=1e-5, momentum=True, polish=True)
FINAL_CONFIG = SolverConfig(max_iter=100_000, tol=1e-8, momentum=True, polish=True)


@dataclass(eq=False)
class SolveResult:
    lam: float
    weights_raw: np.ndarray
    weights: PortfolioWeights
    gap: float
    converged: bool
    iterations: int
    step: float
    theta: np.ndarray
    active: np.ndarray
    screened_at: np.ndarray  # iteration each asset was screened, -1 if never
    iter_trace: list = field(default_factory=list)
    gap_trace: list = field(default_factory=list)
    primal_trace: list = field(default_factory=list)
    screened_trace: list = field(default_factory=list)
    time_trace: list = field(default_factory=list)
    grad_evals: int = 0
    prox_calls: int = 0
    selection_met: bool | None = None

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.weights_raw))

    @property
    def degenerate(self) -> bool:
        return self.weights.degenerate


@dataclass(eq=False)
class PathResult:
    lambdas: np.ndarray
    results: list

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)

    @property
    def supports(self) -> np.ndarray:
        return np.array([r.support_size for r in self.results], dtype=int)

    def __len__(self):
        return len(self.results)


# -- proximal operator ---------------------------------------------------


def soft_threshold(x, tau):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _admm_prox(w, tau, rho, max_iter, tol):
    p = np.maximum(w, 0.0)
    q = w - p
    v = p
    for _ in range(max_iter):
        v = soft_threshold(p - q, tau / rho)
        p_new = np.maximum(w + rho * (v + q), 0.0) / (1.0 + rho)
        q = q + v - p_new
        done = np.max(np.abs(v - p_new)) <= tol and np.max(np.abs(p_new - p)) <= tol
        p = p_new
        if done:
            break
    return p


def prox_l1_nonneg(v, threshold: float, config: SolverConfig | None = None) -> np.ndarray:
    """``argmin_y 0.5*||v - y||^2 + threshold*||y||_1`` subject to ``y >= 0``.

    Nonnegative coordinates need a single soft-threshold; the others go
    through ADMM on the split between the l1 term and the constrained
    quadratic.
    """
    if threshold < 0:
        raise ParameterError("threshold must be >= 0")
    cfg = config or SolverConfig()
    v = np.asarray(v, dtype=float)
    out = np.maximum(v - threshold, 0.0)
    neg = v < 0
    if neg.any():
        out[neg] = _admm_prox(v[neg], threshold, cfg.admm_rho, cfg.admm_max_iter, cfg.admm_tol)
    return out


def accelerated_update(w_prev, w_curr, gradient, active, lam: float, step: float) -> np.ndarray:
    """Per-coordinate bisection / extrapolation around the plain prox step.

    Coordinates that oscillate are bisected toward the bracketing value;
    coordinates that grew twice in a row are extrapolated by doubling the
    step. Inactive coordinates come back as zero.
    """
    w_prev = np.asarray(w_prev, dtype=float)
    w_curr = np.asarray(w_curr, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    idx = np.asarray(active, dtype=np.intp)
    prev, curr = w_prev[idx], w_curr[idx]
    cand = np.maximum(curr - step * (gradient[idx] + lam), 0.0)
    move, last = cand - curr, curr - prev

    nxt = cand.copy()
    flip = move * last < 0
    up = flip & (move > 0)
    down = flip & ~(move > 0)
    nxt[up] = 0.5 * (curr[up] + np.minimum(prev[up], cand[up]))
    nxt[down] = 0.5 * (curr[down] + np.maximum(prev[down], cand[down]))
    grow = ~flip & (cand > curr) & (curr > prev)
    nxt[grow] = 2.0 * cand[grow] - curr[grow]

    out = np.zeros_like(w_curr)
    out[idx] = nxt
    return out


# -- support-restricted Newton -------------------------------------------


def newton_polish(spec: ProblemSpec, w, support, max_iter: int = 50):
    """Active-set Newton on the smooth problem over ``support``.

    Coordinates that a damped Newton step drives to zero leave the working
    set. Returns the refined vector, or ``None`` if a Newton system is singular.
    """
    n, lam, u = spec.data.n, spec.lam, spec.utility
    work = np.asarray(support, dtype=np.intp)
    v = np.asarray(w, dtype=float)[work].copy()

    def objective(XS, x):
        z = XS @ x
        if u.family is Family.LOG and np.any(z + u.eta <= 0):
            return math.inf
        return -float(np.mean(u.value(z))) + lam * float(x.sum())

    XS = spec.X[:, work]
    f = objective(XS, v)
    for _ in range(max_iter):
        if len(work) == 0:
            break
        z = XS @ v
        g = -(XS.T @ u.grad(z)) / n + lam
        if np.max(np.abs(g)) <= 1e-14 * max(1.0, lam):
            break
        H = (XS.T * (-u.hess(z))) @ XS / n
        try:
            p = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(p)):
            return None
        slope = float(g @ p)
        if slope >= 0:
            break
        ratios = np.full(len(v), math.inf)
        neg = p < 0
        ratios[neg] = -v[neg] / p[neg]
        block = int(np.argmin(ratios))
        t = t_max = min(1.0, float(ratios[block]))
        while t > 1e-12:
            fc = objective(XS, v + t * p)
            if fc <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        v = v + t * p
        f_prev, f = f, fc
        if t == t_max and ratios[block] <= 1.0:
            keep = np.arange(len(v)) != block
            work, v = work[keep], v[keep]
            XS = spec.X[:, work]
            f = objective(XS, v)
            continue
        if f_prev - f <= 1e-16 * max(1.0, abs(f)):
            break
    out = np.zeros(spec.data.d)
    out[work] = np.maximum(v, 0.0)
    return out


# -- iteration state -----------------------------------------------------


@dataclass(eq=False)
class SolverState:
    """Mutable-by-replacement iterate of :func:`solve`.

    ``X_active`` caches the active columns contiguously; it is rebuilt only
    when the screened set grows.
    """

    w: np.ndarray
    w_prev: np.ndarray
    screen: ScreenState
    X_active: np.ndarray
    step: float
    t: int = 0
    grad_evals: int = 0
    prox_calls: int = 0
    y: np.ndarray | None = None  # extrapolated point, momentum only
    tk: float = 1.0

    @classmethod
    def start(cls, spec: ProblemSpec, w0, alpha: float, step: float) -> "SolverState":
        st = ScreenState.initial(spec.data.d, alpha)
        w0 = np.array(w0, dtype=float)
        return cls(w=w0, w_prev=w0.copy(), screen=st, X_active=spec.X, step=step, y=w0.copy())

    @property
    def active(self) -> np.ndarray:
        return self.screen.active


def pgd_step(state: SolverState, spec: ProblemSpec, config: SolverConfig) -> SolverState:
    """One proximal gradient step restricted to the active coordinates."""
    act = state.active
    n = spec.data.n
    base = state.y if config.momentum else state.w
    xa = base[act]
    z = state.X_active @ xa
    if spec.utility.family is Family.LOG and np.any(z + spec.utility.eta <= 0):
        raise NumericalError("wealth left the utility domain", state.t + 1)
    grad_a = -(state.X_active.T @ spec.utility.grad(z)) / n
    step = state.step
    extra = {}
    if config.accelerate:
        g = np.zeros_like(state.w)
        g[act] = grad_a
        w_new = accelerated_update(state.w_prev, state.w, g, act, spec.lam, step)
    else:
        w_new = np.zeros_like(state.w)
        w_new[act] = prox_l1_nonneg(xa - step * grad_a, step * spec.lam, config)
        if config.momentum:
            delta = w_new - state.w
            if np.dot(base - w_new, delta) > 0:
                tk, y = 1.0, w_new
            else:
                tk = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * state.tk**2))
                y = w_new + ((state.tk - 1.0) / tk) * delta
            extra = {"y": y, "tk": tk}
    return replace(
        state,
        w=w_new,
        w_prev=state.w,
        t=state.t + 1,
        grad_evals=state.grad_evals + len(act),
        prox_calls=state.prox_calls + 1,
        **extra,
    )


def _certificate(spec: ProblemSpec, state: SolverState):
    """Primal value, scaled dual point, its correlations and the gap."""
    X, n, lam, u = spec.X, spec.data.n, spec.lam, spec.utility
    act = state.active
    wa = state.w[act]
    z = state.X_active @ wa
    primal = -float(np.mean(u.value(z))) + lam * float(wa.sum())
    theta = u.grad(z) / (n * lam)
    corr = X.T @ theta
    scale = max(float(corr.max()), 1.0)
    theta = theta / scale
    corr = corr / scale
    dual = float(np.mean(u.conjugate(n * lam * theta)))
    return primal, theta, corr, primal - dual


def solve(spec: ProblemSpec, config: SolverConfig | None = None, warm_start=None) -> SolveResult:
    """Minimize the l1-regularized negative empirical utility over ``w >= 0``.

    Stops once the duality gap of the current iterate and its scaled dual
    point drops to ``config.tol``; ``max_iter`` is a hard cap.
    """
    cfg = config or SolverConfig()
    spec.utility.require_solver_ready()
    d, n = spec.data.d, spec.data.n
    step = step0 = cfg.step_size or 1.0 / step_lipschitz(spec.data, spec.utility)
    alpha = strong_concavity_alpha(spec.utility, spec.lam, n)

    w0 = np.zeros(d) if warm_start is None else np.asarray(warm_start, dtype=float)
    if w0.shape != (d,) or np.any(w0 < 0) or not np.all(np.isfinite(w0)):
        raise ParameterError("warm start must be a finite nonnegative vector of length d")

    state = SolverState.start(spec, w0, alpha, step)
    screened_at = np.full(d, -1, dtype=np.intp)
    traces = {"iter": [], "gap": [], "primal": [], "screened": [], "time": []}
    clock = time.perf_counter()
    converged = False
    gap, theta = math.inf, None
    last_support, tried = None, None

    while True:
        primal, theta, corr, gap = _certificate(spec, state)
        if not (math.isfinite(primal) and math.isfinite(gap)):
            raise NumericalError("non-finite objective", state.t)
        traces["iter"].append(state.t)
        traces["gap"].append(gap)
        traces["primal"].append(primal)
        traces["screened"].append(len(state.screen.screened))
        traces["time"].append(time.perf_counter() - clock)
        if gap <= cfg.tol:
            converged = True
            break
        if state.t >= cfg.max_iter:
            break

        if cfg.polish:
            support = np.flatnonzero(state.w)
            key = support.tobytes()
            if len(support) and key == last_support and key != tried:
                tried = key
                cand = newton_polish(spec, state.w, support)
                if cand is not None:
                    trial = replace(state, w=cand, y=cand.copy(), tk=1.0)
                    c_primal, c_theta, c_corr, c_gap = _certificate(spec, trial)
                    if math.isfinite(c_gap) and c_gap < gap:
                        state = trial
                        primal, theta, corr, gap = c_primal, c_theta, c_corr, c_gap
                        traces["gap"][-1], traces["primal"][-1] = gap, primal
                        if gap <= cfg.tol:
                            converged = True
                            break
            last_support = key

        if cfg.screening and state.t > 0 and state.t % cfg.screen_every == 0:
            radius = safe_radius(gap, alpha)
            new = screen(spec.data, theta, radius, state.screen)
            dropped = np.setdiff1d(state.active, new.active, assume_unique=True)
            if len(dropped):
                screened_at[dropped] = state.t
                w = state.w.copy()
                w[dropped] = 0.0
                y = state.y.copy()
                y[dropped] = 0.0
                X_active = np.ascontiguousarray(spec.X[:, new.active])
                if cfg.refresh_step and cfg.step_size is None and len(new.active):
                    step = 1.0 / step_lipschitz(X_active, spec.utility)
                state = replace(state, w=w, y=y, screen=new, X_active=X_active, step=step)
            else:
                state = replace(state, screen=new)

        stop = min(cfg.max_iter, (state.t // cfg.check_every + 1) * cfg.check_every)
        while state.t < stop:
            state = pgd_step(state, spec, cfg)

    w = state.w
    return SolveResult(
        lam=spec.lam,
        weights_raw=w,
        weights=PortfolioWeights.from_raw(w),
        gap=gap,
        converged=converged,
        iterations=state.t,
        step=step0,
        theta=theta,
        active=state.active,
        screened_at=screened_at,
        iter_trace=traces["iter"],
        gap_trace=traces["gap"],
        primal_trace=traces["primal"],
        screened_trace=traces["screened"],
        time_trace=traces["time"],
        grad_evals=state.grad_evals,
        prox_calls=state.prox_calls,
    )


# -- regularization path -------------------------------------------------


def default_grid(lmax: float, num: int = 100, decades: float = 2.0) -> np.ndarray:
    """``num`` log-spaced levels from ``lmax`` down to ``lmax / 10**decades``."""
    return np.logspace(math.log10(lmax), math.log10(lmax) - decades, num)


def solve_path(data, utility: UtilitySpec, grid=None, config: SolverConfig | None = None) -> PathResult:
    """Solve along a descending grid, warm-starting each level from the last."""
    data = as_price_relatives(data)
    if grid is None:
        grid = default_grid(lambda_max(data, utility))
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(grid <= 0):
        raise ParameterError("grid must be a non-empty vector of positive levels")
    if np.any(np.diff(grid) >= 0):
        raise ParameterError("grid must be strictly decreasing")

    results = []
    w = None
    for lam in grid:
        res = solve(ProblemSpec(data, utility, float(lam)), config, warm_start=w)
        if results and res.support_size < results[-1].support_size:
            logger.info("support shrank from %d to %d at lambda=%.6g",
                        results[-1].support_size, res.support_size, lam)
        results.append(res)
        w = res.weights_raw
    return PathResult(grid, results)


def select_by_cardinality(path: PathResult, s: int | None = None, n_min: int | None = None) -> SolveResult:
    """Pick a solution from ``path`` by its number of held assets.

    With ``n_min``: the first (most regularized) solution holding at least
    ``n_min`` assets. Otherwise: the largest nonzero support not exceeding
    ``s``, ties going to the larger lambda. If nothing qualifies the closest
    solution is returned with ``selection_met=False``.
    """
    if len(path) == 0:
        raise ParameterError("empty path")
    supports = path.supports
    if n_min is not None:
        hits = np.flatnonzero(supports >= n_min)
        if len(hits):
            idx, met = int(hits[0]), True
        else:
            idx, met = int(np.argmax(supports)), False
    else:
        if s is None or s < 1:
            raise ParameterError("need s >= 1 or n_min")
        ok = np.flatnonzero((supports <= s) & (supports > 0))
        if len(ok):
            idx, met = int(ok[np.argmax(supports[ok])]), True
        else:
            nonzero = np.flatnonzero(supports > 0)
            pool = nonzero if len(nonzero) else np.arange(len(supports))
            idx, met = int(pool[np.argmin(supports[pool])]), False
    return replace(path.results[idx], selection_met=met)
