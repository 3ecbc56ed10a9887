"""Element-wise, cross-sectional and rolling operators on (days, assets) arrays.

NaN policy: any NaN inside a rolling window makes that output NaN; results
that overflow to +/-inf are turned into NaN.  Nothing here looks forward in
time.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-8

_LAG_OPS = frozenset({"Ref", "TsDelta", "TsDiv", "TsPctChange"})


def _finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x[~np.isfinite(x)] = np.nan
    return x


def guard(den: np.ndarray) -> np.ndarray:
    """Push a denominator EPS away from zero, keeping its sign."""
    return den + np.where(den >= 0, EPS, -EPS)


def lookback(name: str, window: int) -> int:
    """Rows of history consumed by a rolling operator beyond the current one."""
    return window if name in _LAG_OPS else window - 1


# ---------------------------------------------------------------- unary

def cs_rank(x: np.ndarray) -> np.ndarray:
    """Per-row average rank of the finite entries mapped to [0, 1]; a lone value maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full_like(x, np.nan)
    for d in range(x.shape[0]):
        row = x[d]
        ok = np.isfinite(row)
        n = int(ok.sum())
        if n == 0:
            continue
        if n == 1:
            out[d, ok] = 0.5
            continue
        v = row[ok]
        less = (v[None, :] < v[:, None]).sum(1)
        eq = (v[None, :] == v[:, None]).sum(1)
        out[d, ok] = (less + (eq - 1) / 2.0) / (n - 1)
    return out


def unary(name: str, x: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        if name == "Abs":
            return np.abs(x)
        if name == "Slog1p":
            return np.sign(x) * np.log1p(np.abs(x))
        if name == "Inv":
            return _finite(1.0 / guard(x))
        if name == "Sign":
            return np.sign(x)
        if name == "Log":
            return _finite(np.log(x + EPS))
        if name == "Rank":
            return cs_rank(x)
    raise KeyError(name)


def binary(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        if name == "Add":
            return _finite(x + y)
        if name == "Sub":
            return _finite(x - y)
        if name == "Mul":
            return _finite(x * y)
        if name == "Div":
            return _finite(x / guard(y))
        if name == "Pow":
            return _finite(np.power(x, y))
        if name in ("Greater", "Less"):
            out = (x > y) if name == "Greater" else (x < y)
            out = out.astype(np.float64)
            out[np.isnan(x) | np.isnan(y)] = np.nan
            return out
    raise KeyError(name)


# ---------------------------------------------------------------- rolling

def _windows(x: np.ndarray, w: int) -> np.ndarray:
    # (D - w + 1, N, w), oldest first along the last axis
    return sliding_window_view(x, w, axis=0)


def _place(values: np.ndarray, shape, w: int, nan_any: np.ndarray | None = None) -> np.ndarray:
    out = np.full(shape, np.nan)
    v = _finite(values)
    if nan_any is not None:
        v[nan_any] = np.nan
    out[w - 1:] = v
    return out


def _lag(x: np.ndarray, d: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    if d < x.shape[0]:
        out[d:] = x[:-d] if d > 0 else x
    return out


FLAT_RTOL = 1e-9


def _flat(win: np.ndarray) -> np.ndarray:
    # spread at rounding level: higher moments are noise there
    hi, lo = win.max(-1), win.min(-1)
    return (hi - lo) <= FLAT_RTOL * np.maximum(np.abs(hi), np.abs(lo))


def _moments(win: np.ndarray):
    n = win.shape[-1]
    mean = win.mean(-1)
    dev = win - mean[..., None]
    m2 = (dev ** 2).mean(-1)
    return n, mean, dev, m2


def rolling(name: str, x: np.ndarray, w: int) -> np.ndarray:
    """Rolling unary operator over the trailing ``w`` rows (lag operators use ``w`` as the lag)."""
    x = np.asarray(x, dtype=np.float64)
    if w < 1:
        raise ValueError("window must be >= 1")
    D = x.shape[0]
    if lookback(name, w) >= D:
        raise ValueError(f"window {w} exceeds the {D} available days")
    with np.errstate(all="ignore"):
        if name in _LAG_OPS:
            prev = _lag(x, w)
            if name == "Ref":
                return prev
            if name == "TsDelta":
                return _finite(x - prev)
            if name == "TsDiv":
                return _finite(x / guard(prev))
            return _finite(x / guard(prev) - 1.0)

        win = _windows(x, w)
        bad = np.isnan(win).any(-1)
        cur = x[w - 1:]
        if name == "TsMean":
            r = win.mean(-1)
        elif name == "TsSum":
            r = win.sum(-1)
        elif name in ("TsStd", "TsVar", "TsIr"):
            if w < 2:
                r = np.full(win.shape[:-1], np.nan)
            else:
                var = win.var(-1, ddof=1)
                if name == "TsVar":
                    r = var
                elif name == "TsStd":
                    r = np.sqrt(var)
                else:
                    sd = np.sqrt(var)
                    r = np.where(sd > EPS, win.mean(-1) / sd, np.nan)
        elif name == "TsSkew":
            n, _, dev, m2 = _moments(win)
            if n < 3:
                r = np.full(win.shape[:-1], np.nan)
            else:
                m3 = (dev ** 3).mean(-1)
                g1 = m3 / m2 ** 1.5
                r = np.where(_flat(win), np.nan, g1 * np.sqrt(n * (n - 1.0)) / (n - 2.0))
        elif name == "TsKurt":
            n, _, dev, m2 = _moments(win)
            if n < 4:
                r = np.full(win.shape[:-1], np.nan)
            else:
                m4 = (dev ** 4).mean(-1)
                g2 = m4 / m2 ** 2 - 3.0
                adj = ((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0))
                r = np.where(_flat(win), np.nan, adj)
        elif name == "TsMax":
            r = win.max(-1)
        elif name == "TsMin":
            r = win.min(-1)
        elif name == "TsMinMaxDiff":
            r = win.max(-1) - win.min(-1)
        elif name == "TsMaxDiff":
            r = cur - win.max(-1)
        elif name == "TsMinDiff":
            r = cur - win.min(-1)
        elif name == "TsMed":
            r = np.median(win, axis=-1)
        elif name == "TsMad":
            med = np.median(win, axis=-1)
            r = np.median(np.abs(win - med[..., None]), axis=-1)
        elif name == "TsRank":
            if w == 1:
                r = np.full(win.shape[:-1], 0.5)
            else:
                less = (win < cur[..., None]).sum(-1)
                eq = (win == cur[..., None]).sum(-1)
                r = (less + (eq - 1) / 2.0) / (w - 1.0)
        elif name == "TsWMA":
            wt = np.arange(1, w + 1, dtype=np.float64)
            r = win @ (wt / wt.sum())
        elif name == "TsEMA":
            a = 2.0 / (w + 1.0)
            wt = a * (1.0 - a) ** np.arange(w - 1, -1, -1, dtype=np.float64)
            r = win @ (wt / wt.sum())
        else:
            raise KeyError(name)
        return _place(r, x.shape, w, bad)


def rolling_pair(name: str, x: np.ndarray, y: np.ndarray, w: int) -> np.ndarray:
    """Rolling covariance / Pearson correlation of two series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    D = x.shape[0]
    if w - 1 >= D:
        raise ValueError(f"window {w} exceeds the {D} available days")
    if w < 2:
        return np.full(x.shape, np.nan)
    wx, wy = _windows(x, w), _windows(y, w)
    bad = np.isnan(wx).any(-1) | np.isnan(wy).any(-1)
    with np.errstate(all="ignore"):
        dx = wx - wx.mean(-1)[..., None]
        dy = wy - wy.mean(-1)[..., None]
        sxy = (dx * dy).sum(-1)
        if name == "TsCov":
            r = sxy / (w - 1.0)
        elif name == "TsCorr":
            sxx = (dx * dx).sum(-1)
            syy = (dy * dy).sum(-1)
            den = np.sqrt(sxx * syy)
            ok = (den > EPS * EPS) & ~_flat(wx) & ~_flat(wy)
            r = np.where(ok, sxy / den, np.nan)
        else:
            raise KeyError(name)
    return _place(r, x.shape, w, bad)
