"""Market panels: loading, universe filters, model inputs and factor signals."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from spo.errors import DataError, ParameterError, SchemaError
from spo.objective import PriceRelativeMatrix, as_price_relatives

PERIODS_PER_YEAR = {"daily": 252, "weekly": 52, "monthly": 12, "quarterly": 4}

LONG_COLUMNS = ("date", "ticker", "open", "close", "return")
WIDE_FIELDS = ("open", "close", "return")


@dataclass(frozen=True, eq=False)
class MarketPanel:
    """Aligned date-by-ticker arrays.

    Unavailable cells hold NaN in every field and False in ``availability``.
    ``risk_free`` is an optional per-period rate aligned with ``dates``.
    """

    dates: np.ndarray
    tickers: tuple
    open: np.ndarray
    close: np.ndarray
    returns: np.ndarray
    availability: np.ndarray
    frequency: str = "daily"
    risk_free: np.ndarray | None = None

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "tickers", tuple(str(t) for t in self.tickers))
        shape = (len(dates), len(self.tickers))
        for name in ("open", "close", "returns"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise SchemaError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        avail = np.asarray(self.availability, dtype=bool)
        if avail.shape != shape:
            raise SchemaError(f"availability has shape {avail.shape}, expected {shape}")
        object.__setattr__(self, "availability", avail)
        if len(dates) > 1 and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise SchemaError("dates must be strictly increasing")
        if len(set(self.tickers)) != len(self.tickers):
            raise SchemaError("duplicate tickers")
        if np.any(self.returns[avail] <= -1) or np.any(np.isnan(self.returns[avail])):
            raise DataError("available returns must be finite and > -1")
        if self.frequency not in PERIODS_PER_YEAR:
            raise SchemaError(f"unknown frequency {self.frequency!r}")
        if self.risk_free is not None:
            rf = np.asarray(self.risk_free, dtype=float)
            if rf.shape != (shape[0],):
                raise SchemaError("risk_free must have one value per date")
            object.__setattr__(self, "risk_free", rf)

    @property
    def n(self) -> int:
        return len(self.dates)

    @property
    def d(self) -> int:
        return len(self.tickers)

    @property
    def periods_per_year(self) -> int:
        return PERIODS_PER_YEAR[self.frequency]

    def date_index(self, as_of) -> int:
        """Row index of ``as_of``, given either as a row number or a date."""
        if isinstance(as_of, (int, np.integer)):
            idx = int(as_of)
            if not 0 <= idx < self.n:
                raise ParameterError(f"row {as_of} outside panel")
            return idx
        key = np.datetime64(as_of, "D")
        hits = np.flatnonzero(self.dates == key)
        if len(hits) == 0:
            raise ParameterError(f"date {as_of} not in panel")
        return int(hits[0])

    def to_long_frame(self) -> pd.DataFrame:
        ii, jj = np.nonzero(self.availability)
        frame = pd.DataFrame({
            "date": pd.to_datetime(self.dates[ii]).strftime("%Y-%m-%d"),
            "ticker": np.asarray(self.tickers, dtype=object)[jj],
            "open": self.open[ii, jj],
            "close": self.close[ii, jj],
            "return": self.returns[ii, jj],
        })
        if self.risk_free is not None:
            frame["rf"] = self.risk_free[ii]
        return frame


# -- loading ---------------------------------------------------------------


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, compression="infer")
    except pd.errors.ParserError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    except (UnicodeDecodeError, EOFError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _to_float(frame: pd.DataFrame, column: str, path) -> np.ndarray:
    raw = frame[column].str.strip()
    blank = (raw == "").to_numpy()
    try:
        # correctly rounded, unlike the fast pandas parser
        return np.where(blank, np.nan, raw.where(~blank, "nan").to_numpy().astype(float))
    except ValueError:
        out = pd.to_numeric(raw.where(~blank, None), errors="coerce")
        bad = out.isna().to_numpy() & ~blank
        line = int(np.flatnonzero(bad)[0]) + 2  # header is line 1
        raise SchemaError(f"{path}: line {line}: cannot parse {column}={raw[bad].iloc[0]!r}") from None


def _to_dates(values, path) -> np.ndarray:
    parsed = pd.to_datetime(pd.Series(values), format="ISO8601", errors="coerce")
    if parsed.isna().any():
        line = int(np.flatnonzero(parsed.isna().to_numpy())[0]) + 2
        raise SchemaError(f"{path}: line {line}: bad date {values[line - 2]!r}")
    return parsed.to_numpy().astype("datetime64[D]")


def _panel_from_long(frame: pd.DataFrame, path, frequency) -> MarketPanel:
    missing = [c for c in LONG_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    dates = _to_dates(frame["date"].to_numpy(), path)
    tickers = frame["ticker"].str.strip().to_numpy()
    if np.any(tickers == ""):
        line = int(np.flatnonzero(tickers == "")[0]) + 2
        raise SchemaError(f"{path}: line {line}: empty ticker")
    keys = pd.DataFrame({"date": dates, "ticker": tickers})
    dup = keys.duplicated()
    if dup.any():
        line = int(np.flatnonzero(dup.to_numpy())[0]) + 2
        raise SchemaError(f"{path}: line {line}: duplicate (date, ticker) row")

    uniq_dates = np.unique(dates)
    uniq_tickers = sorted(set(tickers))
    row = np.searchsorted(uniq_dates, dates)
    col = np.searchsorted(np.array(uniq_tickers, dtype=object), tickers)
    shape = (len(uniq_dates), len(uniq_tickers))
    fields = {}
    for name in ("open", "close", "return"):
        arr = np.full(shape, np.nan)
        arr[row, col] = _to_float(frame, name, path)
        fields[name] = arr
    avail = ~np.isnan(fields["return"])

    risk_free = None
    if "rf" in frame.columns:
        rf_vals = _to_float(frame, "rf", path)
        risk_free = np.zeros(shape[0])
        risk_free[row] = np.nan_to_num(rf_vals)
    return MarketPanel(uniq_dates, uniq_tickers, fields["open"], fields["close"],
                       fields["return"], avail, frequency=frequency, risk_free=risk_free)


def _find_field_file(directory: Path, name: str):
    for suffix in (".csv", ".csv.gz"):
        p = directory / f"{name}{suffix}"
        if p.exists():
            return p
    return None


def _panel_from_wide(directory: Path, frequency) -> MarketPanel:
    frames = {}
    for name in WIDE_FIELDS:
        p = _find_field_file(directory, name)
        if p is None:
            raise DataError(f"{directory}: no {name}.csv")
        frames[name] = (p, _read_csv(p))
    ref_path, ref = frames["return"]
    date_col = ref.columns[0]
    tickers = list(ref.columns[1:])
    dates = _to_dates(ref[date_col].to_numpy(), ref_path)
    arrays = {}
    for name, (p, frame) in frames.items():
        if list(frame.columns[1:]) != tickers or not np.array_equal(
            _to_dates(frame[frame.columns[0]].to_numpy(), p), dates
        ):
            raise SchemaError(f"{p}: date/ticker grid differs from {ref_path}")
        arrays[name] = np.column_stack([_to_float(frame, t, p) for t in tickers]) if tickers else np.empty((len(dates), 0))
    order = np.argsort(dates, kind="stable")
    if len(np.unique(dates)) != len(dates):
        raise SchemaError(f"{ref_path}: duplicate dates")
    avail = ~np.isnan(arrays["return"])
    risk_free = None
    rf_path = _find_field_file(directory, "rf")
    if rf_path is not None:
        rf_frame = _read_csv(rf_path)
        risk_free = _to_float(rf_frame, rf_frame.columns[1], rf_path)[order]
    return MarketPanel(dates[order], tickers, arrays["open"][order], arrays["close"][order],
                       arrays["return"][order], avail[order], frequency=frequency, risk_free=risk_free)


def load_panel(path, format: str = "long", frequency: str = "daily") -> MarketPanel:
    """Read a panel from CSV.

    ``format="long"`` expects one row per (date, ticker) with columns
    ``date,ticker,open,close,return`` and an optional per-date ``rf``.
    ``format="wide"`` expects a directory holding ``open.csv``,
    ``close.csv`` and ``return.csv`` (dates down, tickers across) and an
    optional two-column ``rf.csv``. Gzipped files are accepted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    if format == "long":
        if path.is_dir():
            raise DataError(f"{path}: expected a file for long format")
        return _panel_from_long(_read_csv(path), path, frequency)
    if format == "wide":
        if not path.is_dir():
            raise DataError(f"{path}: expected a directory for wide format")
        return _panel_from_wide(path, frequency)
    raise ParameterError(f"unknown format {format!r}")


def save_panel(panel: MarketPanel, path) -> None:
    """Write ``panel`` in long format; ``.gz`` paths are compressed."""
    frame = panel.to_long_frame()
    frame.to_csv(path, index=False, float_format="%.17g")


# -- model inputs ----------------------------------------------------------


def filter_universe(panel: MarketPanel, as_of, lookback: int) -> np.ndarray:
    """Tickers with a complete record over the ``lookback`` rows ending at ``as_of``."""
    if lookback < 1:
        raise ParameterError("lookback must be >= 1")
    end = panel.date_index(as_of) + 1
    if lookback > end:
        raise ParameterError(f"lookback {lookback} exceeds the {end} rows of history")
    return np.flatnonzero(panel.availability[end - lookback:end].all(axis=0))


def _rows(window, n):
    if isinstance(window, slice):
        start, stop, _ = window.indices(n)
    else:
        start, stop = window
    if not 0 <= start < stop <= n:
        raise ParameterError(f"window {window} outside [0, {n})")
    return start, stop


def to_price_relatives(panel: MarketPanel, subset, window) -> PriceRelativeMatrix:
    """``1 + returns`` over rows ``window = (start, stop)`` and the given columns."""
    start, stop = _rows(window, panel.n)
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        raise DataError("empty asset subset")
    block = panel.returns[start:stop][:, subset]
    if not panel.availability[start:stop][:, subset].all():
        raise DataError("window contains unavailable cells")
    rel = 1.0 + block
    if np.any(rel <= 0):
        raise DataError("nonpositive price relative")
    return PriceRelativeMatrix(rel)


def clip_quantiles(X, q: float = 0.025, method: str = "linear") -> PriceRelativeMatrix:
    """Winsorize every entry into the pooled ``[q, 1-q]`` empirical quantile band.

    ``method`` is passed to :func:`numpy.quantile`. The interpolating
    default moves the band inward when applied to already clipped data;
    order-statistic rules such as ``"inverted_cdf"`` make clipping
    idempotent.
    """
    if not 0 < q < 0.5:
        raise ParameterError("q must lie in (0, 0.5)")
    vals = as_price_relatives(X).values
    lo, hi = np.quantile(vals, [q, 1.0 - q], method=method)
    return PriceRelativeMatrix(np.clip(vals, lo, hi))


# -- factor signals ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactorPanel:
    """Per-date, per-ticker factor values; NaN where not yet defined.

    ``flagged`` marks cells set by a degenerate-case rule rather than
    computed from data.
    """

    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    flagged: np.ndarray | None = None

    @property
    def available(self) -> np.ndarray:
        return ~np.isnan(self.values)


def ewm(x: np.ndarray, alpha: float) -> np.ndarray:
    """Recursive exponentially weighted mean down axis 0.

    ``m_t = alpha*x_t + (1-alpha)*m_{t-1}`` starting from the first
    observation; NaN inputs leave the running mean untouched but are
    reported as NaN.
    """
    x = np.asarray(x, dtype=float)
    out = np.full_like(x, np.nan)
    m = np.full(x.shape[1:], np.nan)
    for t in range(x.shape[0]):
        xt = x[t]
        ok = ~np.isnan(xt)
        fresh = ok & np.isnan(m)
        m = np.where(fresh, xt, m)
        upd = ok & ~fresh
        m = np.where(upd, alpha * xt + (1.0 - alpha) * m, m)
        out[t] = np.where(ok, m, np.nan)
    return out


def factor_rsi(panel: MarketPanel, smoothing: float = 1 / 24) -> FactorPanel:
    if not 0 < smoothing <= 1:
        raise ParameterError("smoothing must lie in (0, 1]")
    dif = panel.close - panel.open
    dif = np.where(panel.availability, dif, np.nan)
    up = ewm(np.where(np.isnan(dif), np.nan, np.maximum(dif, 0.0)), smoothing)
    mag = ewm(np.abs(dif), smoothing)
    flat = mag == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rsi = np.where(flat, 0.5, up / mag)
    return FactorPanel(rsi, "rsi", {"smoothing": smoothing}, flagged=flat)


def _rolling(x: np.ndarray, window: int):
    """Trailing windows down axis 0; row ``t`` holds rows ``t-window+1 .. t``."""
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(x, window, axis=0)


def factor_sr(panel: MarketPanel, window: int = 26, ma_window: int = 26) -> FactorPanel:
    """Moving average of the trailing in-sample Sharpe ratio.

    The Sharpe ratio at row ``t`` is mean/std (ddof=1) of returns over the
    last ``window`` rows; the factor is its trailing ``ma_window`` mean.
    Zero-volatility windows give 0 and are flagged.
    """
    if window < 2 or ma_window < 1:
        raise ParameterError("need window >= 2 and ma_window >= 1")
    n, d = panel.returns.shape
    ret = np.where(panel.availability, panel.returns, np.nan)
    sharpe = np.full((n, d), np.nan)
    flagged = np.zeros((n, d), dtype=bool)
    if n >= window:
        win = _rolling(ret, window)
        mu = win.mean(axis=-1)
        sd = win.std(axis=-1, ddof=1)
        flat = sd <= 1e-12 * np.maximum(np.abs(mu), 1e-300)
        with np.errstate(invalid="ignore", divide="ignore"):
            sr = np.where(flat, 0.0, mu / sd)
        sharpe[window - 1:] = sr
        flagged[window - 1:] = flat & ~np.isnan(mu)
    values = np.full((n, d), np.nan)
    if n >= ma_window:
        values[ma_window - 1:] = _rolling(sharpe, ma_window).mean(axis=-1)
    return FactorPanel(values, "sr", {"window": window, "ma_window": ma_window}, flagged=flagged)


def factor_inputs(factor: FactorPanel, subset, window, eps: float = 0.01) -> PriceRelativeMatrix:
    """Turn factor rows into strictly positive pseudo price relatives.

    Each row is standardized across the selected assets and mapped to
    ``max(1 + z, eps)``; rows with zero dispersion map to 1.
    """
    start, stop = _rows(window, factor.values.shape[0])
    block = factor.values[start:stop][:, np.asarray(subset, dtype=np.intp)]
    if np.isnan(block).any():
        raise DataError("factor undefined inside the window")
    mu = block.mean(axis=1, keepdims=True)
    sd = block.std(axis=1, keepdims=True)
    safe = np.where(sd > 0, sd, 1.0)
    z = np.where(sd > 0, (block - mu) / safe, 0.0)
    return PriceRelativeMatrix(np.maximum(1.0 + z, eps))


def compute_factor(panel: MarketPanel, kind: str) -> FactorPanel:
    if kind == "sr":
        return factor_sr(panel)
    if kind == "rsi":
        return factor_rsi(panel)
    raise ParameterError(f"unknown factor {kind!r}")


# -- synthetic data ----------------------------------------------------------


def synthesize_market(
    seed: int,
    n: int,
    d: int,
    vol_range=(0.01, 0.03),
    corr_block=(10, 0.3),
    drift=0.0003,
    start="2010-01-04",
    frequency: str = "daily",
    vols=None,
) -> MarketPanel:
    """Seeded lognormal market with block-correlated assets.

    Asset ``j`` has volatility spaced linearly over ``vol_range`` and shares
    a common factor with the other members of its block of size
    ``corr_block[0]`` at correlation ``corr_block[1]``. ``drift`` is the
    per-period log drift, scalar or one per asset; ``vols`` overrides the
    linear spacing with explicit per-asset volatilities. Opens equal the previous
    close, so close/open moves carry the sign of each return.
    """
    if n < 1 or d < 1:
        raise ParameterError("need n, d >= 1")
    block, rho = corr_block
    if block < 1 or not 0 <= rho <= 1:
        raise ParameterError("corr_block must be (size >= 1, rho in [0, 1])")
    rng = np.random.default_rng(seed)
    if vols is None:
        vols = np.linspace(vol_range[0], vol_range[1], d)
    else:
        vols = np.broadcast_to(np.asarray(vols, dtype=float), (d,))
        if np.any(vols < 0):
            raise ParameterError("vols must be >= 0")
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (d,))
    groups = np.arange(d) // block
    common = rng.standard_normal((n, groups.max() + 1))[:, groups]
    idio = rng.standard_normal((n, d))
    shocks = math.sqrt(rho) * common + math.sqrt(1.0 - rho) * idio
    log_rel = drift + vols * shocks
    rel = np.exp(log_rel)
    close = 100.0 * np.cumprod(rel, axis=0)
    open_ = np.vstack([np.full((1, d), 100.0), close[:-1]])
    if frequency == "daily":
        dates = pd.bdate_range(start, periods=n).to_numpy()
    else:
        freq = {"weekly": "W-FRI", "monthly": "ME", "quarterly": "QE"}[frequency]
        dates = pd.date_range(start, periods=n, freq=freq).to_numpy()
    tickers = [f"A{j:04d}" for j in range(d)]
    return MarketPanel(dates, tickers, open_, close, rel - 1.0,
                       np.ones((n, d), dtype=bool), frequency=frequency)


def bundled_sample_path() -> Path:
    return Path(__file__).resolve().parent / "resources" / "sample_panel.csv"


def resolve_data_path(spec: str | os.PathLike) -> Path:
    """Map the ``@sample`` token onto the bundled panel; pass other paths through."""
    if str(spec) == "@sample":
        return bundled_sample_path()
    return Path(spec)
