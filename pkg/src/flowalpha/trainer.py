"""Trajectory-balance training and the mining loop with pool admission."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .engine import Panel, PanelError, Signal, evaluate
from .formula import ExprTree, Vocabulary, full_vocabulary, to_rpn
from .gfn import Trajectory, sample_trajectory, trajectory_terms
from .policy import PolicyNet
from .pool import AlphaPool
from .rewards import (DEFAULT_K, RewardBreakdown, combined, degenerate_breakdown, r_ic, r_nov,
                      r_sa)
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("episode", "length", "r_ic", "r_sa", "r_nov", "total", "tb_loss", "logZ",
               "admitted", "stepped", "rpn")


@dataclass
class TrainConfig:
    episodes: int = 10000
    max_len: int = 20
    hidden: int = 128
    layers: int = 2
    entropy_coef: float = 0.01
    lr: float = 1e-4
    sa_weight: float = 1.0
    nov_weight: float = 0.3
    pool_capacity: int = 50
    T_anneal: int | None = None
    K: int = DEFAULT_K
    seed: int = 0
    ic_min: float = 0.01
    nov_min: float = 0.1
    logz_lr: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        if self.max_len < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("max_len, hidden and layers must be positive")
        if self.lr <= 0 or (self.logz_lr is not None and self.logz_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.K <= 0 or self.pool_capacity <= 0:
            raise ValueError("K and pool_capacity must be positive")
        if self.T_anneal is not None and self.T_anneal <= 0:
            raise ValueError("T_anneal must be positive")

    @property
    def anneal_steps(self) -> int:
        return self.T_anneal if self.T_anneal is not None else max(self.episodes, 1)

    @property
    def logz_rate(self) -> float:
        return self.logz_lr if self.logz_lr is not None else self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def tb_loss(log_pf: Tensor, log_z: Tensor, reward: float, log_pb: float = 0.0) -> Tensor:
    """(logZ + log P_F - log R - log P_B)^2."""
    if not reward > 0:
        raise ValueError("reward must be strictly positive")
    return T.square(T.add(T.add(log_z, log_pf), -(math.log(reward) + log_pb)))


def entropy_loss(logp: Tensor, masks: np.ndarray) -> Tensor:
    """Negative summed entropy of the per-step action distributions."""
    return T.neg(T.tsum(T.masked_entropy(logp, np.asarray(masks, dtype=bool))))


def final_loss(tb: Tensor, ent: Tensor, beta: float = 0.01) -> Tensor:
    return T.add(tb, T.mul(ent, beta))


def trajectory_loss(net: PolicyNet, traj: Trajectory, reward: float,
                    beta: float) -> tuple[Tensor, Tensor]:
    """Final objective for one trajectory; also returns the TB term."""
    log_pf, ent_sum = trajectory_terms(net, traj)
    tb = tb_loss(log_pf, net.log_z, reward)
    return final_loss(tb, T.neg(ent_sum), beta), tb


def fit_reward(net: PolicyNet, log_reward: Callable[[ExprTree], float], steps: int, *,
               max_len: int = 20, batch: int = 16, lr: float = 1e-3, logz_lr: float = 0.05,
               beta: float = 0.0, seed: int = 0) -> list[float]:
    """Train ``net`` by trajectory balance against a fixed reward function of the terminal.

    Each step averages the objective over ``batch`` on-policy trajectories.
    Returns the mean TB loss per step.
    """
    if steps < 0 or batch < 1:
        raise ValueError("steps must be non-negative and batch positive")
    opt = T.Adam(net.params, lr=lr, lr_scale={"logZ": logz_lr / lr})
    history = []
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        total, tb_sum = None, 0.0
        for _ in range(batch):
            traj = sample_trajectory(net, rng, max_len, embed_terminal=False)
            log_pf, ent = trajectory_terms(net, traj)
            tb = T.square(T.add(T.add(net.log_z, log_pf), -log_reward(traj.terminal)))
            loss = final_loss(tb, T.neg(ent), beta)
            total = loss if total is None else T.add(total, loss)
            tb_sum += tb.item()
        opt.zero_grad()
        T.backward(T.mul(total, 1.0 / batch))
        opt.step()
        history.append(tb_sum / batch)
    return history


# --------------------------------------------------------------------------
# mining
# --------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    length: int
    rpn: str
    breakdown: RewardBreakdown
    tb_loss: float
    log_z: float
    admitted: bool
    stepped: bool

    def row(self) -> list[str]:
        b = self.breakdown
        return [str(self.episode), str(self.length), repr(b.r_ic), repr(b.r_sa), repr(b.r_nov),
                repr(b.total), repr(self.tb_loss), repr(self.log_z), str(int(self.admitted)),
                str(int(self.stepped)), self.rpn]


class Miner:
    """Stateful mining run; ``run`` continues from wherever the run currently is."""

    CACHE_SIZE = 4096

    def __init__(self, config: TrainConfig, panel: Panel, vocab: Vocabulary | None = None,
                 out_dir: str | Path | None = None):
        self.config = config
        self.panel = panel
        self.vocab = vocab or full_vocabulary()
        self.net = PolicyNet(self.vocab, config.hidden, config.layers, config.seed)
        self.opt = T.Adam(self.net.params, lr=config.lr,
                          lr_scale={"logZ": config.logz_rate / config.lr})
        self.pool = AlphaPool(config.pool_capacity)
        self.episode = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._cache: OrderedDict[str, tuple[Signal, float]] = OrderedDict()
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # evaluation ------------------------------------------------------------
    def _evaluate(self, traj: Trajectory) -> tuple[Signal | None, float]:
        rpn = to_rpn(traj.terminal)
        hit = self._cache.get(rpn)
        if hit is not None:
            self._cache.move_to_end(rpn)
            return hit
        try:
            sig = evaluate(traj.terminal, self.panel)
        except PanelError:
            sig = None
        if sig is None or sig.degenerate:
            out = (None, 0.0)
        else:
            out = (sig, r_ic(sig, self.panel.labels))
        self._cache[rpn] = out
        if len(self._cache) > self.CACHE_SIZE:
            self._cache.popitem(last=False)
        return out

    def reward(self, traj: Trajectory) -> tuple[RewardBreakdown, Signal | None]:
        cfg = self.config
        sig, ric = self._evaluate(traj)
        if sig is None:
            return degenerate_breakdown(self.episode, cfg.anneal_steps, cfg.sa_weight,
                                        cfg.nov_weight), None
        values = self.pool.values()
        rsa = r_sa(traj.embedding, sig.values, self.pool.embeddings(), values, cfg.K)
        usable = np.where(sig.usable_days[:, None], sig.values, np.nan)
        rnov = r_nov(usable, values)
        br = combined(ric, rsa, rnov, self.episode, cfg.anneal_steps, cfg.sa_weight,
                      cfg.nov_weight)
        return br, sig

    # one episode -----------------------------------------------------------
    def step(self) -> EpisodeRecord:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.episode])
        traj = sample_trajectory(self.net, rng, cfg.max_len)
        br, sig = self.reward(traj)
        admitted = False
        if sig is not None and br.r_ic >= cfg.ic_min and br.r_nov >= cfg.nov_min:
            admitted = self.pool.add(traj.terminal, traj.embedding, sig, br.r_ic, self.episode)
        loss, tb = trajectory_loss(self.net, traj, br.reward, cfg.entropy_coef)
        self.opt.zero_grad()
        stepped = False
        if math.isfinite(loss.item()):
            T.backward(loss)
            stepped = self.opt.step()
        else:
            logger.warning("episode %d: non-finite loss, update skipped", self.episode)
        rec = EpisodeRecord(self.episode, len(traj.terminal), to_rpn(traj.terminal), br,
                            tb.item(), self.net.log_z.item(), admitted, stepped)
        self.episode += 1
        return rec

    def run(self, episodes: int | None = None) -> AlphaPool:
        """Run until ``episodes`` total episodes (default: the configured count)."""
        target = self.config.episodes if episodes is None else episodes
        every = self.config.checkpoint_every
        try:
            while self.episode < target:
                rec = self.step()
                self._log(rec)
                if self.out_dir is not None and every > 0 and self.episode % every == 0:
                    self.save_checkpoint()
        finally:
            self._close_log()
        if self.out_dir is not None:
            self.save_checkpoint()
            self.pool.export(self.out_dir / "pool.csv")
        return self.pool

    # logging ---------------------------------------------------------------
    @property
    def log_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "train_log.csv"

    def _log(self, rec: EpisodeRecord) -> None:
        if self.out_dir is None:
            return
        if self._log_fh is None:
            new = not self.log_path.exists() or self.log_path.stat().st_size == 0
            self._log_fh = open(self.log_path, "a", newline="")
            self._log_writer = csv.writer(self._log_fh, lineterminator="\n")
            if new:
                self._log_writer.writerow(LOG_COLUMNS)
        self._log_writer.writerow(rec.row())

    def _close_log(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # checkpoints -----------------------------------------------------------
    def save_checkpoint(self, directory: str | Path | None = None) -> Path:
        d = Path(directory) if directory is not None else self.out_dir / "checkpoint"
        d.mkdir(parents=True, exist_ok=True)
        if self._log_fh is not None:
            self._log_fh.flush()
        arrays = self.net.arrays()
        arrays.update(self.opt.state_arrays())
        arrays["meta/episode"] = np.array([float(self.episode)])
        save_arrays(d / "params.bin", arrays)
        state = {"episode": self.episode, "config": self.config.to_dict(),
                 "pool": self.pool.state()}
        tmp = d / "state.json.tmp"
        tmp.write_text(json.dumps(state, indent=1))
        tmp.replace(d / "state.json")
        return d

    @classmethod
    def resume(cls, directory: str | Path, panel: Panel, vocab: Vocabulary | None = None,
               out_dir: str | Path | None = None, config: TrainConfig | None = None) -> "Miner":
        """Restore a run from a checkpoint directory; the training log is cut back to match."""
        d = Path(directory)
        state = json.loads((d / "state.json").read_text())
        cfg = config or TrainConfig.from_dict(state["config"])
        miner = cls(cfg, panel, vocab, out_dir)
        arrays = load_arrays(d / "params.bin")
        miner.net.load_arrays(arrays)
        miner.opt.load_state_arrays(arrays)
        miner.episode = int(state["episode"])
        if int(arrays["meta/episode"][0]) != miner.episode:
            raise ValueError("checkpoint files disagree on the episode count")
        miner.pool = AlphaPool.from_state(state["pool"], panel, miner.vocab)
        if miner.log_path is not None and miner.log_path.exists():
            lines = miner.log_path.read_text().splitlines(keepends=True)
            miner.log_path.write_text("".join(lines[:1 + miner.episode]))
        return miner


def mine(config: TrainConfig, panel: Panel, vocab: Vocabulary | None = None,
         out_dir: str | Path | None = None) -> AlphaPool:
    return Miner(config, panel, vocab, out_dir).run()
