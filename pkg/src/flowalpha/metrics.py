"""Correlation metrics and an overlapping-tranche portfolio backtest."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .engine import Panel, Signal
from .rewards import daily_corr

logger = logging.getLogger(__name__)

PERIODS_PER_YEAR = 252
REPORT_COLUMNS = ("IC", "ICIR", "RIC", "RICIR", "AR", "MDD", "SR")
MODES = {
    # mode: (long fraction, short fraction)
    "long_only": (0.2, 0.0),
    "long_short": (0.1, 0.1),
}


@dataclass
class CorrelationMetrics:
    ic: float
    icir: float | None
    rank_ic: float
    rank_icir: float | None
    n_days: int


@dataclass
class MetricsReport:
    ic: float | None
    icir: float | None
    rank_ic: float | None
    rank_icir: float | None
    ar: float
    mdd: float
    sr: float | None
    daily_returns: np.ndarray = field(repr=False)
    wealth: np.ndarray = field(repr=False)
    dates: np.ndarray = field(repr=False)

    def summary(self) -> dict[str, float | None]:
        return dict(zip(REPORT_COLUMNS, (self.ic, self.icir, self.rank_ic, self.rank_icir,
                                         self.ar, self.mdd, self.sr)))


def _ir(series: np.ndarray) -> float | None:
    if len(series) < 2:
        return None
    sd = float(np.std(series, ddof=1))
    mean = float(np.mean(series))
    if not sd > 1e-12 * max(abs(mean), 1e-300):
        return None
    return mean / sd


def rank_rows(x: np.ndarray) -> np.ndarray:
    """Per-day average ranks over finite cells; other cells stay NaN."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full_like(x, np.nan)
    for d in range(x.shape[0]):
        ok = np.isfinite(x[d])
        if ok.any():
            out[d, ok] = rankdata(x[d, ok])
    return out


def _values(signal) -> np.ndarray:
    if isinstance(signal, Signal):
        v = np.array(signal.values, dtype=np.float64)
        v[~signal.usable_days] = np.nan
        return v
    return np.asarray(signal, dtype=np.float64)


def correlation_metrics(signal, labels: np.ndarray) -> CorrelationMetrics:
    x = _values(signal)
    y = np.asarray(labels, dtype=np.float64)
    rho = daily_corr(x, y)
    ok = np.isfinite(rho)
    if not ok.any():
        raise ValueError("every day is degenerate")
    both = np.isfinite(x) & np.isfinite(y)
    rrho = daily_corr(rank_rows(np.where(both, x, np.nan)), rank_rows(np.where(both, y, np.nan)))
    rok = np.isfinite(rrho)
    series, rseries = rho[ok], rrho[rok]
    return CorrelationMetrics(abs(float(series.mean())), _ir(series),
                              abs(float(rseries.mean())) if rok.any() else float("nan"),
                              _ir(rseries), int(ok.sum()))


def max_drawdown(wealth: np.ndarray) -> float:
    """Worst peak-to-trough fractional loss, as a value <= 0; the starting wealth 1 counts as a peak."""
    w = np.concatenate([[1.0], np.asarray(wealth, dtype=np.float64)])
    peak = np.maximum.accumulate(w)
    return float(np.min(w / peak - 1.0))


def portfolio_stats(returns: np.ndarray) -> tuple[float, float, float | None, np.ndarray]:
    """(AR, MDD, SR, wealth) for a daily return series with a zero risk-free rate."""
    R = np.asarray(returns, dtype=np.float64)
    if len(R) == 0:
        raise ValueError("empty return series")
    wealth = np.cumprod(1.0 + R)
    ar = PERIODS_PER_YEAR * float(R.mean())
    sr = None
    if len(R) >= 2:
        sd = float(R.std(ddof=1))
        if sd > 0:
            sr = math.sqrt(PERIODS_PER_YEAR) * float(R.mean()) / sd
    return ar, max_drawdown(wealth), sr, wealth


def _basket(row: np.ndarray, frac: float, top: bool) -> np.ndarray:
    ok = np.flatnonzero(np.isfinite(row))
    n = len(ok)
    k = int(math.floor(frac * n + 1e-9))
    if k < 1:
        logger.warning("only %d assets; basket widened to a single asset", n)
        k = 1
    order = np.argsort(-row[ok] if top else row[ok], kind="stable")
    return ok[order[:k]]


def tranche_returns(signal, close: np.ndarray, mode: str = "long_only", hold: int = 20,
                    cost_bps: float = 0.0) -> tuple[np.ndarray, int]:
    """Daily returns of overlapping tranches, each 1/hold of capital, held ``hold`` days.

    A tranche formed on day d's signal buys at the close of d+1 and earns
    the asset returns of days d+2 .. d+1+hold.  Returns the series and the
    index of its first day.
    """
    if mode not in MODES:
        raise ValueError(f"unknown market mode {mode!r}")
    if hold < 1:
        raise ValueError("hold must be positive")
    x = _values(signal)
    close = np.asarray(close, dtype=np.float64)
    D = close.shape[0]
    with np.errstate(all="ignore"):
        r = close[1:] / close[:-1] - 1.0
    r = np.vstack([np.full((1, close.shape[1]), np.nan), r])
    r[~np.isfinite(r)] = np.nan
    long_frac, short_frac = MODES[mode]
    sides = 1 + (short_frac > 0)
    days = [d for d in range(D) if d + 2 < D and np.isfinite(x[d]).sum() >= sides]
    if not days:
        raise ValueError("not enough history for the holding horizon")
    start = days[0] + 2
    R = np.zeros(D - start)
    cost = cost_bps * 1e-4 * sides / hold
    for d in days:
        long_idx = _basket(x[d], long_frac, top=True)
        a, b = d + 2, min(d + 2 + hold, D)
        seg = np.nan_to_num(np.nanmean(r[a:b][:, long_idx], axis=1)) if b > a else np.zeros(0)
        if short_frac > 0:
            short_idx = _basket(x[d], short_frac, top=False)
            seg = seg - np.nan_to_num(np.nanmean(r[a:b][:, short_idx], axis=1))
        R[a - start:b - start] += seg / hold
        if cost:
            R[a - start] -= cost
            if d + 1 + hold < D:
                R[d + 1 + hold - start] -= cost
    return R, start


def backtest(signal, panel: Panel, mode: str = "long_only", hold: int = 20,
             cost_bps: float = 0.0) -> MetricsReport:
    R, start = tranche_returns(signal, panel.feature("close"), mode, hold, cost_bps)
    ar, mdd, sr, wealth = portfolio_stats(R)
    try:
        cm = correlation_metrics(signal, panel.labels)
        ic, icir, ric, ricir = cm.ic, cm.icir, cm.rank_ic, cm.rank_icir
    except ValueError:
        ic = icir = ric = ricir = None
    return MetricsReport(ic, icir, ric, ricir, ar, mdd, sr, R, wealth, panel.dates[start:])


def emit_wealth_curve(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "R", "W"])
        for d, r, wv in zip(report.dates, report.daily_returns, report.wealth):
            w.writerow([str(np.datetime64(d, "D")), repr(float(r)), repr(float(wv))])


def read_wealth_curve(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    dates = np.array([r[0] for r in rows], dtype="datetime64[D]")
    return dates, np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows])


def format_value(v: float | None) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_summary(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        for k, v in report.summary().items():
            fh.write(f"{k} = {format_value(v)}\n")
