"""Reward terms: predictive correlation, structure/behaviour alignment, novelty, and their annealed sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import Signal

REWARD_FLOOR = 1e-6
DEFAULT_K = 5


@dataclass(frozen=True)
class RewardBreakdown:
    r_ic: float
    r_sa: float
    r_nov: float
    lambda_t: float
    eta_t: float
    total: float
    degenerate: bool = False

    @property
    def reward(self) -> float:
        """Strictly positive value fed to the trajectory-balance loss."""
        if self.degenerate or not math.isfinite(self.total) or self.total < REWARD_FLOOR:
            return REWARD_FLOOR
        return self.total

    @property
    def log_reward(self) -> float:
        return math.log(self.reward)


def daily_corr(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-day Pearson correlation over assets where both sides are finite; NaN on degenerate days."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = np.isfinite(x) & np.isfinite(y)
    n = m.sum(axis=1)
    xs = np.where(m, x, 0.0)
    ys = np.where(m, y, 0.0)
    with np.errstate(all="ignore"):
        xm = xs.sum(axis=1) / n
        ym = ys.sum(axis=1) / n
        xc = np.where(m, x - xm[:, None], 0.0)
        yc = np.where(m, y - ym[:, None], 0.0)
        sxy = (xc * yc).sum(axis=1)
        sxx = (xc * xc).sum(axis=1)
        syy = (yc * yc).sum(axis=1)
        # spread below ~1e-12 of the magnitude is rounding noise on a constant row
        xscale = np.where(m, np.abs(x), 0.0).max(axis=1, initial=0.0)
        yscale = np.where(m, np.abs(y), 0.0).max(axis=1, initial=0.0)
        flat = (sxx <= (1e-12 * xscale) ** 2 * n) | (syy <= (1e-12 * yscale) ** 2 * n)
        rho = sxy / np.sqrt(sxx * syy)
    bad = (n < 2) | flat | ~np.isfinite(rho)
    return np.where(bad, np.nan, np.clip(rho, -1.0, 1.0))


def ic(x: np.ndarray, y: np.ndarray) -> float:
    """Signed mean of the per-day correlation series; NaN when no day is usable."""
    rho = daily_corr(x, y)
    ok = np.isfinite(rho)
    return float(rho[ok].mean()) if ok.any() else float("nan")


def _usable(signal: Signal) -> np.ndarray:
    v = np.array(signal.values, dtype=np.float64)
    v[~signal.usable_days] = np.nan
    return v


def r_ic(signal: Signal, labels: np.ndarray) -> float:
    """Absolute IC of a signal against labels; 0 if nothing is usable."""
    val = ic(_usable(signal), labels)
    return 0.0 if not math.isfinite(val) else abs(val)


def behavioral_distance(z_i: np.ndarray, z_j: np.ndarray) -> float:
    """Mean over days and assets of the squared difference of normalised outputs.

    Rows outside a signal's valid span count as the cross-sectional mean (0).
    """
    a = np.nan_to_num(np.asarray(z_i, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    b = np.nan_to_num(np.asarray(z_j, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    if a.shape != b.shape:
        raise ValueError("signals must share a shape")
    return float(np.mean((a - b) ** 2))


def neighbor_weights(embedding: np.ndarray, pool_embeddings: np.ndarray,
                     k: int = DEFAULT_K) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k nearest pool embeddings and their softmax(-squared distance) weights."""
    if k <= 0:
        raise ValueError("K must be positive")
    E = np.asarray(pool_embeddings, dtype=np.float64)
    d2 = ((E - np.asarray(embedding, dtype=np.float64)[None, :]) ** 2).sum(axis=1)
    k = min(k, len(d2))
    idx = np.argsort(d2, kind="stable")[:k]
    logits = -d2[idx]
    w = np.exp(logits - logits.max())
    return idx, w / w.sum()


def r_sa(embedding: np.ndarray, values: np.ndarray, pool_embeddings: np.ndarray,
         pool_values: Sequence[np.ndarray], k: int = DEFAULT_K) -> float:
    if k <= 0:
        raise ValueError("K must be positive")
    if len(pool_values) == 0:
        return 1.0
    idx, w = neighbor_weights(embedding, pool_embeddings, k)
    dist = np.array([behavioral_distance(values, pool_values[j]) for j in idx])
    return float(np.exp(-np.dot(w, dist)))


def r_nov(values: np.ndarray, library: Sequence[np.ndarray]) -> float:
    """One minus the strongest absolute day-wise correlation with any library member."""
    best = 0.0
    for member in library:
        c = ic(values, member)
        if math.isfinite(c):
            best = max(best, abs(c))
    return 1.0 - min(best, 1.0)


def anneal_weights(T: float, T_anneal: float, lambda_max: float = 1.0,
                   eta_max: float = 0.3) -> tuple[float, float]:
    if T_anneal <= 0:
        raise ValueError("T_anneal must be positive")
    if T < 0:
        raise ValueError("T must be non-negative")
    frac = max(0.0, 1.0 - T / T_anneal)
    return frac * lambda_max, frac * eta_max


def combined(r_ic: float, r_sa: float, r_nov: float, T: float, T_anneal: float,
             lambda_max: float = 1.0, eta_max: float = 0.3) -> RewardBreakdown:
    lam, eta = anneal_weights(T, T_anneal, lambda_max, eta_max)
    if lam == 0.0 and eta == 0.0:
        total = r_ic
    else:
        total = r_ic + lam * r_sa + eta * r_nov
    return RewardBreakdown(r_ic, r_sa, r_nov, lam, eta, total)


def degenerate_breakdown(T: float, T_anneal: float, lambda_max: float = 1.0,
                         eta_max: float = 0.3) -> RewardBreakdown:
    lam, eta = anneal_weights(T, T_anneal, lambda_max, eta_max)
    return RewardBreakdown(0.0, 0.0, 0.0, lam, eta, REWARD_FLOOR, degenerate=True)
