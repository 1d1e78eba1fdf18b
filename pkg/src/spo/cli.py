"""Command-line entry point: ``spo solve|path|backtest|bench-screening``.

Every run writes ``config.json`` holding the fully resolved flat
configuration; passing it back through ``--config`` reproduces the run.
Exit codes: 1 configuration error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from spo.backtest import BacktestConfig, ExpectedUtility, backtest, make_strategy, write_report
from spo.data import filter_universe, load_panel, resolve_data_path, synthesize_market, to_price_relatives
from spo.errors import DataError, DomainError, NumericalError, ParameterError
from spo.objective import ProblemSpec, lambda_max
from spo.solver import CV_CONFIG, FINAL_CONFIG, SolverConfig, default_grid, solve, solve_path
from spo.utility import UtilitySpec

logger = logging.getLogger("spo")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class ConfigError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


COMMON = {
    "data": "@sample",
    "format": "long",
    "frequency": "daily",
    "utility": "log",
    "eta": None,
    "aversion": 1.0,
    "tol": 1e-8,
    "max_iter": 100_000,
    "screen_every": 30,
    "momentum": True,
    "polish": True,
    "seed": 0,
    "out": "spo-out",
    "threads": 1,
}

DEFAULTS = {
    "solve": {**COMMON, "lambda": "0.5max", "window": None},
    "path": {**COMMON, "grid": None, "num_lambdas": 100, "decades": 2.0, "window": None},
    "backtest": {
        **COMMON,
        "tol": None,
        "max_iter": None,
        "strategy": "LOG",
        "train_window": 120,
        "hold_window": 63,
        "cv_folds": 5,
        "num_lambdas": 100,
        "decades": 2.0,
        "cardinality": None,
        "n_min": None,
        "fees": False,
        "factor": None,
        "clip_q": None,
    },
    "bench-screening": {
        **COMMON,
        "tol": 1e-6,
        "max_iter": 1_000_000,
        "polish": False,
        "grid": "0.9max,0.7max,0.5max,0.3max,0.1max",
        "window": None,
    },
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON file of option values; flags override it")
    p.add_argument("--data", help="long CSV, wide directory, @sample, or synthetic:N:D")
    p.add_argument("--format", choices=["long", "wide"])
    p.add_argument("--frequency", choices=["daily", "weekly", "monthly", "quarterly"])
    p.add_argument("--utility", choices=["log", "exp"])
    p.add_argument("--eta", type=float, help="utility shift; log defaults to the data minimum")
    p.add_argument("--aversion", type=float, help="risk aversion a of the exp utility")
    p.add_argument("--tol", type=float, help="duality-gap tolerance")
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--screen-every", dest="screen_every", help="iterations between screenings, or 'none'")
    p.add_argument("--momentum", action=argparse.BooleanOptionalAction)
    p.add_argument("--polish", action=argparse.BooleanOptionalAction)
    p.add_argument("--seed", type=int, help="seed for synthetic data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spo", description="Sparse expected-utility portfolios with safe screening.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve at one regularization level")
    _add_common(p)
    p.add_argument("--lambda", dest="lambda", help="value, or a multiple of lambda_max such as 0.5max")
    p.add_argument("--window", help="row range start:stop of the panel (default: all rows)")

    p = sub.add_parser("path", help="solve along a descending lambda grid")
    _add_common(p)
    p.add_argument("--grid", help="comma-separated lambdas (values or <r>max)")
    p.add_argument("--num-lambdas", type=int, dest="num_lambdas")
    p.add_argument("--decades", type=float)
    p.add_argument("--window")

    p = sub.add_parser("backtest", help="rolling-window out-of-sample backtest")
    _add_common(p)
    p.add_argument("--strategy", help="LOG, EXP-<a>, EW, GMV-P or MV-P")
    p.add_argument("--train-window", type=int, dest="train_window")
    p.add_argument("--hold-window", type=int, dest="hold_window")
    p.add_argument("--cv-folds", type=int, dest="cv_folds")
    p.add_argument("--num-lambdas", type=int, dest="num_lambdas")
    p.add_argument("--decades", type=float)
    p.add_argument("--cardinality", type=int)
    p.add_argument("--n-min", type=int, dest="n_min")
    p.add_argument("--fees", action=argparse.BooleanOptionalAction, help="charge transaction fees")
    p.add_argument("--factor", choices=["sr", "rsi"])
    p.add_argument("--clip-q", type=float, dest="clip_q")

    p = sub.add_parser("bench-screening", help="matched screened/unscreened solves")
    _add_common(p)
    p.add_argument("--grid", help="comma-separated lambdas (values or <r>max)")
    p.add_argument("--window")
    return parser


# -- config resolution ---------------------------------------------------


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    defaults = DEFAULTS[args.command]
    cfg = dict(defaults)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("command", None)
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if isinstance(cfg["screen_every"], str):
        s = cfg["screen_every"].strip().lower()
        if s in ("none", "inf", "off"):
            cfg["screen_every"] = None
        else:
            try:
                cfg["screen_every"] = int(s)
            except ValueError:
                raise ConfigError(f"bad --screen-every {s!r}") from None
    return {"command": args.command, **cfg}


def solver_config(cfg: dict, **overrides) -> SolverConfig:
    kw = {
        "max_iter": cfg["max_iter"],
        "tol": cfg["tol"],
        "screen_every": cfg["screen_every"],
        "momentum": cfg["momentum"],
        "polish": cfg["polish"],
    }
    kw.update(overrides)
    return SolverConfig(**kw)


def load_data(cfg: dict):
    spec = str(cfg["data"])
    if spec.startswith("synthetic:"):
        try:
            _, n, d = spec.split(":")
            return synthesize_market(cfg["seed"], int(n), int(d), frequency=cfg["frequency"])
        except ValueError:
            raise ConfigError(f"bad synthetic spec {spec!r}, expected synthetic:N:D") from None
    path = resolve_data_path(spec)
    return load_panel(path, format=cfg["format"], frequency=cfg["frequency"])


def training_matrix(panel, window):
    if window:
        try:
            start, stop = (int(x) if x else None for x in str(window).split(":"))
        except ValueError:
            raise ConfigError(f"bad window {window!r}, expected start:stop") from None
    else:
        start, stop = None, None
    start = 0 if start is None else start
    stop = panel.n if stop is None else stop
    if not 0 <= start < stop <= panel.n:
        raise ConfigError(f"window {start}:{stop} outside the {panel.n} panel rows")
    subset = filter_universe(panel, stop - 1, stop - start)
    if len(subset) == 0:
        raise DataError("no asset has a complete record over the window")
    return to_price_relatives(panel, subset, (start, stop)), [panel.tickers[j] for j in subset]


def make_utility(cfg: dict, X) -> UtilitySpec:
    if cfg["utility"] == "log":
        return UtilitySpec.log(float(X.values.min()) if cfg["eta"] is None else cfg["eta"])
    return UtilitySpec.exp(cfg["aversion"], 0.0 if cfg["eta"] is None else cfg["eta"])


def parse_lambdas(text, lmax: float) -> np.ndarray:
    out = []
    for item in str(text).split(","):
        item = item.strip().lower()
        try:
            if item.endswith("max"):
                head = item[:-3].rstrip("*")
                out.append((float(head) if head else 1.0) * lmax)
            else:
                out.append(float(item))
        except ValueError:
            raise ConfigError(f"bad lambda {item!r}") from None
    if not out or any(not v > 0 for v in out):
        raise ConfigError("lambdas must be positive")
    return np.array(out)


# -- output helpers ------------------------------------------------------


def _num(x):
    return repr(float(x))


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    return out


# -- commands ------------------------------------------------------------


def cmd_solve(cfg: dict) -> int:
    panel = load_data(cfg)
    X, tickers = training_matrix(panel, cfg["window"])
    util = make_utility(cfg, X)
    lmax = lambda_max(X, util)
    lams = parse_lambdas(cfg["lambda"], lmax)
    if len(lams) != 1:
        raise ConfigError("solve takes a single lambda; use the path command for a grid")
    lam = lams[0]
    res = solve(ProblemSpec(X, util, float(lam)), solver_config(cfg))
    out = _prepare_out(cfg)
    _write_csv(out / "weights.csv", ["ticker", "weight", "raw_weight"],
               [(t, _num(w), _num(r)) for t, w, r in zip(tickers, res.weights.weights, res.weights_raw)])
    _write_csv(out / "gap_trace.csv", ["iteration", "gap", "primal", "screened"],
               [(i, _num(g), _num(p), s) for i, g, p, s in
                zip(res.iter_trace, res.gap_trace, res.primal_trace, res.screened_trace)])
    _write_json(out / "summary.json", {
        "lambda": float(lam),
        "lambda_max": float(lmax),
        "utility": util.label,
        "eta": util.eta,
        "iterations": res.iterations,
        "gap": res.gap,
        "converged": res.converged,
        "support_size": res.support_size,
        "degenerate": res.degenerate,
        "grad_evals": res.grad_evals,
        "screened": int(np.count_nonzero(res.screened_at >= 0)),
        "n": X.n,
        "d": X.d,
        "config": cfg,
    })
    if not res.converged:
        logger.warning("solver stopped at max_iter with gap %.3g", res.gap)
    return 0


def cmd_path(cfg: dict) -> int:
    panel = load_data(cfg)
    X, tickers = training_matrix(panel, cfg["window"])
    util = make_utility(cfg, X)
    lmax = lambda_max(X, util)
    if cfg["grid"]:
        grid = parse_lambdas(cfg["grid"], lmax)
    else:
        grid = default_grid(lmax, cfg["num_lambdas"], cfg["decades"])
    path = solve_path(X, util, grid, solver_config(cfg))
    out = _prepare_out(cfg)
    rows, wrows = [], []
    for k, (lam, res) in enumerate(zip(path.lambdas, path.results)):
        rows.append((k, _num(lam), _num(lam / lmax), res.support_size, _num(res.gap),
                     _num(res.primal_trace[-1]), res.iterations, int(res.converged)))
        for j in np.flatnonzero(res.weights_raw):
            wrows.append((k, _num(lam), tickers[j], _num(res.weights.weights[j])))
    _write_csv(out / "path.csv",
               ["index", "lambda", "lambda_ratio", "support", "gap", "objective", "iterations", "converged"], rows)
    _write_csv(out / "path_weights.csv", ["index", "lambda", "ticker", "weight"], wrows)
    _write_json(out / "summary.json", {
        "lambda_max": float(lmax),
        "utility": util.label,
        "eta": util.eta,
        "points": len(path),
        "supports": path.supports.tolist(),
        "all_converged": all(r.converged for r in path.results),
        "config": cfg,
    })
    return 0


def cmd_backtest(cfg: dict) -> int:
    panel = load_data(cfg)
    strategy = make_strategy(cfg["strategy"])
    if isinstance(strategy, ExpectedUtility) and cfg["eta"] is not None:
        strategy.eta = cfg["eta"]
    overrides = {k: cfg[k] for k in ("tol", "max_iter") if cfg[k] is not None}
    common = {"screen_every": cfg["screen_every"], "momentum": cfg["momentum"], "polish": cfg["polish"]}
    bcfg = BacktestConfig(
        train_window=cfg["train_window"],
        hold_window=cfg["hold_window"],
        cv_folds=cfg["cv_folds"],
        n_lambdas=cfg["num_lambdas"],
        lambda_decades=cfg["decades"],
        fee_rate=0.001 if cfg["fees"] else 0.0,
        activity_fee=0.00001 if cfg["fees"] else 0.0,
        n_min=cfg["n_min"],
        cardinality=cfg["cardinality"],
        clip_q=cfg["clip_q"],
        factor=cfg["factor"],
        cv_solver=SolverConfig(**{"max_iter": CV_CONFIG.max_iter, "tol": CV_CONFIG.tol, **common}),
        final_solver=SolverConfig(**{"max_iter": FINAL_CONFIG.max_iter, "tol": FINAL_CONFIG.tol,
                                     **common, **overrides}),
    )
    report = backtest(panel, strategy, bcfg, threads=cfg["threads"])
    out = _prepare_out(cfg)
    write_report(report, out, extra_config=cfg)
    for w in report.warnings:
        logger.warning(w)
    return 0


def cmd_bench_screening(cfg: dict) -> int:
    panel = load_data(cfg)
    X, _ = training_matrix(panel, cfg["window"])
    util = make_utility(cfg, X)
    lmax = lambda_max(X, util)
    grid = parse_lambdas(cfg["grid"], lmax)
    screened_cfg = solver_config(cfg)
    plain_cfg = solver_config(cfg, screen_every=None)
    rows, ratio_rows, trace_rows = [], [], []
    for lam in grid:
        spec = ProblemSpec(X, util, float(lam))
        runs = {}
        for label, sc in (("screened", screened_cfg), ("unscreened", plain_cfg)):
            t0 = time.perf_counter()
            res = solve(spec, sc)
            runs[label] = (res, time.perf_counter() - t0)
            for it, tt, g in zip(res.iter_trace, res.time_trace, res.gap_trace):
                trace_rows.append((_num(lam), label, it, _num(tt), _num(g)))
        res_s, t_s = runs["screened"]
        res_u, t_u = runs["unscreened"]
        for it, s in zip(res_s.iter_trace, res_s.screened_trace):
            ratio_rows.append((_num(lam), _num(lam / lmax), it, _num(s / X.d)))
        rows.append((
            _num(lam), _num(lam / lmax), _num(t_s), _num(t_u), _num(t_s / t_u if t_u > 0 else np.nan),
            res_s.grad_evals, res_u.grad_evals, _num(res_s.grad_evals / max(res_u.grad_evals, 1)),
            res_s.prox_calls, res_u.prox_calls, res_s.iterations, res_u.iterations,
            int(res_s.converged), int(res_u.converged), _num(len(res_s.screened_at[res_s.screened_at >= 0]) / X.d),
        ))
    out = _prepare_out(cfg)
    _write_csv(out / "bench.csv", [
        "lambda", "lambda_ratio", "time_screened", "time_unscreened", "time_ratio",
        "grad_evals_screened", "grad_evals_unscreened", "grad_eval_ratio",
        "prox_calls_screened", "prox_calls_unscreened", "iterations_screened", "iterations_unscreened",
        "converged_screened", "converged_unscreened", "final_screening_ratio",
    ], rows)
    _write_csv(out / "screening_ratio.csv", ["lambda", "lambda_ratio", "iteration", "ratio"], ratio_rows)
    _write_csv(out / "gap_trace.csv", ["lambda", "run", "iteration", "time", "gap"], trace_rows)
    _write_json(out / "summary.json", {"lambda_max": float(lmax), "n": X.n, "d": X.d,
                                       "utility": util.label, "config": cfg})
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "path": cmd_path,
    "backtest": cmd_backtest,
    "bench-screening": cmd_bench_screening,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (DataError, FileNotFoundError) as exc:
        print(f"spo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"spo: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, DomainError, ValueError, TypeError) as exc:
        print(f"spo: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
