"""Alpha pool, dynamic linear combiner, and conditioning diagnostics for sets of alphas."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .engine import Panel, Signal, cross_normalize, evaluate
from .formula import ExprTree, RPNError, Vocabulary, canonical, parse_rpn, to_rpn
from .rewards import daily_corr

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 50


@dataclass
class PoolEntry:
    tree: ExprTree
    rpn: str
    embedding: np.ndarray
    signal: Signal
    r_ic: float
    admit_step: int


class AlphaPool:
    """Bounded, de-duplicated set of admitted alphas in admission order."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: list[PoolEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[PoolEntry]:
        return iter(self.entries)

    def __contains__(self, rpn: str) -> bool:
        return any(e.rpn == rpn for e in self.entries)

    def embeddings(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.embedding for e in self.entries])

    def values(self) -> list[np.ndarray]:
        return [e.signal.values for e in self.entries]

    def add(self, tree: ExprTree, embedding: np.ndarray, signal: Signal, r_ic: float,
            step: int) -> bool:
        """Insert unless duplicate; at capacity the lowest-r_ic alpha (possibly the newcomer) is dropped."""
        rpn = to_rpn(tree)
        if rpn in self:
            return False
        entry = PoolEntry(canonical(tree), rpn, np.array(embedding, dtype=np.float64), signal,
                          float(r_ic), int(step))
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
            return True
        worst = min(range(len(self.entries)), key=lambda i: self.entries[i].r_ic)
        if entry.r_ic <= self.entries[worst].r_ic:
            return False
        del self.entries[worst]
        self.entries.append(entry)
        return True

    def best_ic(self) -> float:
        return max((e.r_ic for e in self.entries), default=0.0)

    # persistence -----------------------------------------------------------
    def export(self, path: str | Path) -> None:
        """One line per entry: canonical RPN, admit step, r_ic."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rpn", "admit_step", "r_ic"])
            for e in self.entries:
                w.writerow([e.rpn, e.admit_step, repr(e.r_ic)])

    def state(self) -> dict:
        return {
            "capacity": self.capacity,
            "entries": [{"rpn": e.rpn, "admit_step": e.admit_step, "r_ic": e.r_ic,
                         "embedding": [float(x) for x in e.embedding]} for e in self.entries],
        }

    @classmethod
    def from_state(cls, state: dict, panel: Panel, vocab: Vocabulary | None = None) -> "AlphaPool":
        """Rebuild a pool, re-evaluating signals on ``panel`` (evaluation is deterministic)."""
        pool = cls(int(state["capacity"]))
        for item in state["entries"]:
            tree = parse_rpn(item["rpn"], vocab)
            pool.entries.append(PoolEntry(tree, item["rpn"], np.array(item["embedding"]),
                                          evaluate(tree, panel), float(item["r_ic"]),
                                          int(item["admit_step"])))
        return pool


def read_pool_file(path: str | Path, vocab: Vocabulary | None = None) -> list[ExprTree]:
    """Parse an exported pool file; plain one-RPN-per-line files are accepted too."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pool file not found: {path}")
    trees = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip() or row[0].strip().startswith("#"):
                continue
            if row[0] == "rpn":
                continue
            try:
                trees.append(parse_rpn(row[0], vocab))
            except RPNError as exc:
                raise RPNError(f"{path}: {exc}") from exc
    if not trees:
        raise ValueError(f"{path}: pool file has no alphas")
    return trees


# --------------------------------------------------------------------------
# Mega-Alpha combiner
# --------------------------------------------------------------------------

@dataclass
class MegaAlpha:
    signal: Signal
    weights: np.ndarray                 # (rebalances, entries)
    rebalance_days: np.ndarray
    labels: list[str] = field(default_factory=list)

    def write_weights(self, path: str | Path, dates: np.ndarray) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date"] + self.labels)
            for r, d in enumerate(self.rebalance_days):
                w.writerow([str(np.datetime64(dates[d], "D"))] + [repr(float(x)) for x in self.weights[r]])


def ridge_solve(X: np.ndarray, y: np.ndarray, ridge_scale: float = 1e-9) -> np.ndarray:
    """Least squares with a tiny ridge of ``ridge_scale * trace(G) / k`` on the Gram matrix G."""
    n, k = X.shape
    G = X.T @ X / n
    b = X.T @ y / n
    eps = ridge_scale * np.trace(G) / k
    if not eps > 0:
        eps = ridge_scale
    return np.linalg.solve(G + eps * np.eye(k), b)


def combine_mega_alpha(values: Sequence[np.ndarray], labels: np.ndarray, lookback: int = 252,
                       top_k: int = 10, rebalance: int = 20, embargo: int = 21,
                       ridge_scale: float = 1e-9, names: Sequence[str] | None = None) -> MegaAlpha:
    """Periodic top-k re-selection by trailing |IC| and least-squares re-weighting.

    At rebalance day t only labels of days <= t - embargo are used, so the
    combination never sees a label whose horizon has not closed.  The
    weights then apply to days t .. t+rebalance-1.
    """
    if not values:
        raise ValueError("pool is empty")
    if lookback < 1 or top_k < 1 or rebalance < 1 or embargo < 0:
        raise ValueError("lookback, top_k and rebalance must be positive")
    Z = np.stack([np.asarray(v, dtype=np.float64) for v in values])
    M, D, N = Z.shape
    y = np.asarray(labels, dtype=np.float64)
    t0 = embargo + lookback - 1
    if t0 >= D:
        raise ValueError(f"lookback {lookback} plus embargo {embargo} exceeds the {D} available days")
    days = np.arange(t0, D, rebalance)
    W = np.zeros((len(days), M))
    out = np.full((D, N), np.nan)
    daily = np.stack([daily_corr(Z[m], y) for m in range(M)])        # (M, D)
    for r, t in enumerate(days):
        lo, hi = t - embargo - lookback + 1, t - embargo + 1
        win = daily[:, lo:hi]
        ok = np.isfinite(win)
        counts = ok.sum(axis=1)
        score = np.where(counts > 0, np.abs(np.where(ok, win, 0.0).sum(axis=1)) / np.maximum(counts, 1), -1.0)
        eligible = np.flatnonzero(counts > 0)
        if len(eligible) == 0:
            continue
        order = eligible[np.argsort(-score[eligible], kind="stable")][:top_k]
        Xw = Z[order, lo:hi].reshape(len(order), -1).T
        yw = y[lo:hi].reshape(-1)
        rows = np.isfinite(yw) & np.isfinite(Xw).all(axis=1)
        if rows.sum() < len(order):
            continue
        w = ridge_solve(Xw[rows], yw[rows], ridge_scale)
        W[r, order] = w
        end = min(t + rebalance, D)
        block = np.tensordot(w, Z[order, t:end], axes=1)
        out[t:end] = block
    filled = ~np.isnan(out).all(axis=1)
    if not filled.any():
        raise ValueError("no rebalance window had valid rows")
    z, flat = cross_normalize(out[filled])
    values_out = np.full((D, N), np.nan)
    values_out[filled] = z
    day_deg = ~filled
    day_deg[filled] = flat
    first = int(np.argmax(filled))
    sig = Signal(values_out, first, bool(flat.all()), day_deg)
    labels_out = list(names) if names is not None else [f"alpha{m}" for m in range(M)]
    return MegaAlpha(sig, W, days, labels_out)


# --------------------------------------------------------------------------
# diversity / conditioning diagnostics
# --------------------------------------------------------------------------

@dataclass
class DiversityReport:
    sigma: np.ndarray
    eigenvalues: np.ndarray          # descending
    kappa: float
    trace_variance: float
    vif: np.ndarray
    prediction_risk: float
    in_sample_variance: float
    singular: bool

    def summary(self) -> dict[str, float]:
        return {
            "n_alphas": float(len(self.eigenvalues)),
            "lambda_max": float(self.eigenvalues[0]),
            "lambda_min": float(self.eigenvalues[-1]),
            "kappa2": self.kappa,
            "trace_variance": self.trace_variance,
            "prediction_risk": self.prediction_risk,
            "in_sample_variance": self.in_sample_variance,
            "max_vif": float(np.max(self.vif)),
            "singular": float(self.singular),
        }


def correlation_matrix(columns: Sequence[np.ndarray]) -> np.ndarray:
    """Correlation of flattened signals over cells where every signal is finite."""
    X = np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in columns], axis=1)
    X = X[np.isfinite(X).all(axis=1)]
    if len(X) < 2:
        raise ValueError("not enough common observations")
    X = X - X.mean(axis=0)
    sd = np.sqrt((X ** 2).mean(axis=0))
    if np.any(sd == 0):
        raise ValueError("constant signal in correlation matrix")
    X = X / sd
    S = X.T @ X / len(X)
    S = (S + S.T) / 2
    np.fill_diagonal(S, 1.0)
    return S


def equicorrelated(n: int, rho: float) -> np.ndarray:
    S = np.full((n, n), float(rho))
    np.fill_diagonal(S, 1.0)
    return S


def equicorrelated_eigenvalues(n: int, rho: float) -> np.ndarray:
    """Descending spectrum: 1+(n-1)rho once, 1-rho with multiplicity n-1 (for rho >= 0)."""
    return np.array(sorted([1 + (n - 1) * rho] + [1 - rho] * (n - 1), reverse=True))


def variance_diagnostics(sigma: np.ndarray, sigma2: float = 1.0, T: int = 252,
                         tol: float = 1e-12) -> DiversityReport:
    S = np.asarray(sigma, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise ValueError("need a square correlation matrix of at least 2 alphas")
    if T <= 0 or sigma2 < 0:
        raise ValueError("T must be positive and sigma2 non-negative")
    N = S.shape[0]
    lam = np.linalg.eigvalsh((S + S.T) / 2)[::-1]
    singular = bool(lam[-1] <= tol * max(lam[0], 1.0))
    if singular:
        kappa = math.inf
        tv = math.inf
        vif = np.full(N, math.inf)
    else:
        kappa = float(lam[0] / lam[-1])
        tv = float(sigma2 / T * np.sum(1.0 / lam))
        vif = np.diag(np.linalg.inv(S)).copy()
    return DiversityReport(S, lam, kappa, tv, vif, float(sigma2 * (1 + N / T)),
                           float(sigma2 * N), singular)


def ridge_variance(sigma: np.ndarray, lam: float, sigma2: float = 1.0, T: int = 252) -> float:
    if lam < 0:
        raise ValueError("ridge penalty must be non-negative")
    ev = np.linalg.eigvalsh(np.asarray(sigma, dtype=np.float64))
    return float(sigma2 / T * np.sum(1.0 / (ev + lam)))
