"""Panel data, alpha evaluation and synthetic market generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import ops
from .formula import ExprTree, Kind, RPNError, parse_rpn

logger = logging.getLogger(__name__)

FEATURE_ORDER = ("open", "close", "high", "low", "vwap", "volume")
CSV_COLUMNS = ("date", "asset", "open", "high", "low", "close", "vwap", "volume")
DEFAULT_HORIZON = 20


class PanelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable (days x assets) market data with forward-return labels."""

    dates: np.ndarray
    assets: tuple[str, ...]
    features: dict[str, np.ndarray]
    labels: np.ndarray
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        D, N = len(self.dates), len(self.assets)
        if len(set(self.assets)) != N:
            raise PanelError("duplicate assets")
        if D > 1 and not np.all(self.dates[1:] > self.dates[:-1]):
            raise PanelError("dates must be strictly increasing")
        missing = set(FEATURE_ORDER) - set(self.features)
        if missing:
            raise PanelError(f"missing features {sorted(missing)}")
        for k, v in self.features.items():
            if v.shape != (D, N):
                raise PanelError(f"feature {k} has shape {v.shape}, expected {(D, N)}")
            v.setflags(write=False)
        if self.labels.shape != (D, N):
            raise PanelError("labels shape mismatch")
        self.labels.setflags(write=False)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def feature(self, name: str) -> np.ndarray:
        return self.features[name]

    def with_labels(self, labels: np.ndarray) -> "Panel":
        return Panel(self.dates, self.assets, self.features, np.asarray(labels, dtype=np.float64),
                     self.horizon)

    def slice_days(self, start: int, stop: int) -> "Panel":
        return Panel(self.dates[start:stop], self.assets,
                     {k: v[start:stop].copy() for k, v in self.features.items()},
                     self.labels[start:stop].copy(), self.horizon)


@dataclass
class Signal:
    """Cross-sectionally normalised alpha output; rows before ``valid_from`` are NaN."""

    values: np.ndarray
    valid_from: int
    degenerate: bool = False
    day_degenerate: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.day_degenerate is None:
            self.day_degenerate = np.zeros(self.values.shape[0], dtype=bool)

    @property
    def usable_days(self) -> np.ndarray:
        d = np.zeros(self.values.shape[0], dtype=bool)
        d[self.valid_from:] = True
        return d & ~self.day_degenerate


def forward_returns(close: np.ndarray, horizon: int = DEFAULT_HORIZON) -> np.ndarray:
    """Label for day d: buy at close d+1, sell at close d+1+horizon."""
    close = np.asarray(close, dtype=np.float64)
    D = close.shape[0]
    y = np.full_like(close, np.nan)
    if D > horizon + 1:
        with np.errstate(all="ignore"):
            y[: D - horizon - 1] = close[horizon + 1:] / close[1: D - horizon] - 1.0
    y[~np.isfinite(y)] = np.nan
    return y


def cross_normalize(values: np.ndarray, eps: float = ops.EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-day mean imputation then z-score.

    Returns the normalised matrix and a per-day flag marking rows that were
    all-NaN or had (near) zero spread; those rows come back as zeros.
    """
    x = np.array(values, dtype=np.float64)
    x[~np.isfinite(x)] = np.nan
    D = x.shape[0]
    degenerate = np.zeros(D, dtype=bool)
    all_nan = np.isnan(x).all(axis=1)
    degenerate |= all_nan
    with np.errstate(all="ignore"):
        mean = np.nanmean(np.where(all_nan[:, None], 0.0, x), axis=1)
        x = np.where(np.isnan(x), mean[:, None], x)
        x = x - mean[:, None]
        std = np.sqrt((x ** 2).mean(axis=1))
    flat = ~(std >= eps)
    degenerate |= flat
    z = np.where(flat[:, None], 0.0, x / np.where(flat, 1.0, std)[:, None])
    return z, degenerate


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _eval(tree: ExprTree, i: int, panel: Panel) -> tuple[np.ndarray, int]:
    node = tree.nodes[i]
    tok = node.token
    k = tok.kind
    if k is Kind.FEATURE:
        return np.array(panel.feature(tok.name), dtype=np.float64), 0
    if any(c is None for c in node.children):
        raise RPNError("cannot evaluate a partial tree")
    if k is Kind.UNARY:
        x, lb = _eval(tree, node.children[0], panel)
        return ops.unary(tok.name, x), lb
    if k is Kind.BINARY:
        x, la = _eval(tree, node.children[0], panel)
        y, lb = _eval(tree, node.children[1], panel)
        return ops.binary(tok.name, x, y), max(la, lb)
    if k is Kind.ROLLING_UNARY:
        x, lb = _eval(tree, node.children[0], panel)
        w = tree.nodes[node.children[1]].token.window
        return ops.rolling(tok.name, x, w), lb + ops.lookback(tok.name, w)
    if k is Kind.ROLLING_BINARY:
        x, la = _eval(tree, node.children[0], panel)
        y, lb = _eval(tree, node.children[1], panel)
        w = tree.nodes[node.children[2]].token.window
        return ops.rolling_pair(tok.name, x, y, w), max(la, lb) + w - 1
    raise RPNError(f"{tok} cannot be evaluated as data")


def evaluate_raw(tree: ExprTree | str, panel: Panel) -> tuple[np.ndarray, int]:
    """Un-normalised alpha values and the first day free of lookback truncation."""
    if isinstance(tree, str):
        tree = parse_rpn(tree)
    if not tree.is_complete:
        raise RPNError("cannot evaluate a partial tree")
    for w in tree.windows():
        if w >= panel.n_days:
            raise PanelError(f"window {w} needs more than the {panel.n_days} available days")
    return _eval(tree, tree.root, panel)


def evaluate(tree: ExprTree | str, panel: Panel) -> Signal:
    raw, valid_from = evaluate_raw(tree, panel)
    D = panel.n_days
    if valid_from >= D:
        return Signal(np.full(raw.shape, np.nan), D, True, np.ones(D, dtype=bool))
    tail = raw[valid_from:]
    z, flat = cross_normalize(tail)
    values = np.full(raw.shape, np.nan)
    values[valid_from:] = z
    day_deg = np.zeros(D, dtype=bool)
    day_deg[valid_from:] = flat
    all_nan = np.isnan(tail).all(axis=1).any()
    degenerate = bool(all_nan or flat.all())
    return Signal(values, valid_from, degenerate, day_deg)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def noise_for_ic(target_ic: float) -> float:
    """Label noise std giving an expected per-day correlation of ``target_ic`` with a unit-variance signal."""
    if not 0 < target_ic <= 1:
        raise ValueError("target IC must be in (0, 1]")
    return float(np.sqrt(1.0 / target_ic ** 2 - 1.0))


def generate_synthetic(seed: int, n_days: int = 750, n_assets: int = 100,
                       planted: ExprTree | str | None = None, noise: float = 0.0,
                       horizon: int = DEFAULT_HORIZON, start: str = "2015-01-01") -> Panel:
    """Geometric random-walk OHLCV panel.

    Without ``planted`` the labels are forward returns of the price path.
    With ``planted`` they are the planted alpha's normalised signal plus
    Gaussian noise of std ``noise``, so the oracle IC is known.
    """
    if n_days < 100 or n_assets < 10:
        raise PanelError("synthetic panels need at least 100 days and 10 assets")
    if noise < 0:
        raise PanelError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    D, N = int(n_days), int(n_assets)
    vol = rng.uniform(0.01, 0.03, size=N)
    beta = rng.uniform(0.5, 1.5, size=N)
    market = rng.normal(0.0, 0.01, size=D)
    ret = 0.0002 + beta * market[:, None] + vol * rng.standard_normal((D, N))
    close = rng.uniform(10.0, 100.0, size=N) * np.exp(np.cumsum(ret, axis=0))
    prev = np.vstack([close[:1] / np.exp(ret[:1]), close[:-1]])
    open_ = prev * np.exp(0.3 * vol * rng.standard_normal((D, N)))
    top = np.maximum(open_, close)
    bottom = np.minimum(open_, close)
    high = top * np.exp(np.abs(0.5 * vol * rng.standard_normal((D, N))))
    low = bottom * np.exp(-np.abs(0.5 * vol * rng.standard_normal((D, N))))
    frac = rng.uniform(0.0, 1.0, size=(D, N))
    vwap = low + frac * (high - low)
    volume = np.exp(rng.normal(13.0, 0.5, size=N) + 0.3 * rng.standard_normal((D, N)))
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(D), roll="forward")
    assets = tuple(f"A{i:04d}" for i in range(N))
    feats = {"open": open_, "close": close, "high": high, "low": low, "vwap": vwap,
             "volume": volume}
    panel = Panel(dates, assets, feats, forward_returns(close, horizon), horizon)
    if planted is None:
        return panel
    sig = evaluate(planted, panel)
    if sig.degenerate:
        raise PanelError("planted alpha is degenerate on this panel")
    labels = sig.values + noise * rng.standard_normal((D, N))
    labels[: sig.valid_from] = np.nan
    labels[D - horizon - 1:] = np.nan
    return panel.with_labels(labels)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Long format, one row per (date, asset)."""
    D, N = panel.n_days, panel.n_assets
    dates = np.repeat(np.datetime_as_string(panel.dates, unit="D"), N)
    assets = np.tile(np.array(panel.assets), D)
    cols = [panel.feature(c).reshape(-1) for c in CSV_COLUMNS[2:]]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in range(D * N):
            fh.write(f"{dates[r]},{assets[r]}," + ",".join(_fmt(c[r]) for c in cols) + "\n")


def write_labels_csv(panel: Panel, path: str | Path) -> None:
    D, N = panel.n_days, panel.n_assets
    dates = np.repeat(np.datetime_as_string(panel.dates, unit="D"), N)
    assets = np.tile(np.array(panel.assets), D)
    lab = panel.labels.reshape(-1)
    with open(path, "w", newline="") as fh:
        fh.write("date,asset,label\n")
        for r in range(D * N):
            fh.write(f"{dates[r]},{assets[r]},{_fmt(lab[r])}\n")


def read_panel_csv(path: str | Path, labels_path: str | Path | None = None,
                   horizon: int = DEFAULT_HORIZON) -> Panel:
    """Load the long CSV format; absent (date, asset) cells become NaN.

    Labels come from ``labels_path`` when given, otherwise they are forward
    returns of ``close``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"panel file not found: {path}")
    df = pd.read_csv(path, dtype={"asset": str}, float_precision="round_trip")
    missing = set(CSV_COLUMNS) - set(df.columns)
    if missing:
        raise PanelError(f"panel CSV lacks columns {sorted(missing)}")
    if df.duplicated(["date", "asset"]).any():
        raise PanelError("duplicate (date, asset) rows")
    df["date"] = pd.to_datetime(df["date"]).values.astype("datetime64[D]")
    dates = np.array(sorted(df["date"].unique()), dtype="datetime64[D]")
    assets = tuple(sorted(df["asset"].unique()))
    di = np.searchsorted(dates, df["date"].values.astype("datetime64[D]"))
    ai = pd.Index(assets).get_indexer(df["asset"])
    D, N = len(dates), len(assets)
    feats = {}
    for c in FEATURE_ORDER:
        m = np.full((D, N), np.nan)
        m[di, ai] = df[c].to_numpy(dtype=np.float64)
        feats[c] = m
    if labels_path is not None:
        lf = pd.read_csv(labels_path, dtype={"asset": str}, float_precision="round_trip")
        lab = np.full((D, N), np.nan)
        ld = np.searchsorted(dates, pd.to_datetime(lf["date"]).values.astype("datetime64[D]"))
        la = pd.Index(assets).get_indexer(lf["asset"])
        ok = (la >= 0) & (ld < D)
        lab[ld[ok], la[ok]] = lf["label"].to_numpy(dtype=np.float64)[ok]
    else:
        lab = forward_returns(feats["close"], horizon)
    return Panel(dates, assets, feats, lab, horizon)
