"""Trajectory sampling with masking and early stop, and forward-probability accounting.

Every state has a single parent (see ``formula``), so the backward policy
is identically 1 and contributes nothing to trajectory balance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .formula import EMPTY, ExprTree, Vocabulary, construction_sequence, legal_actions, to_infix
from .policy import PolicyNet, policy_log_probs
from .tensor import Tensor


@dataclass
class Trajectory:
    states: list[ExprTree]
    actions: list[int]
    log_pf: list[float]
    stop_log: list[float]
    masks: list[np.ndarray]
    stopped_early: bool
    terminal: ExprTree
    embedding: np.ndarray | None = field(default=None, repr=False)

    @property
    def complete(self) -> bool:
        return bool(self.actions) and self.terminal.is_complete and len(self.masks) == len(self.actions) - 1

    def __len__(self) -> int:
        return len(self.actions)


def early_stop_prob(tree: ExprTree, max_len: int = 20) -> float:
    """Stop probability Len/MaxLen at a state that is already a valid expression."""
    if not tree.is_complete:
        raise ValueError("early stop only applies to complete expressions")
    return min(1.0, len(tree) / max_len)


def _policy_mask(tree: ExprTree, vocab: Vocabulary, max_len: int) -> np.ndarray:
    mask = legal_actions(tree, vocab, max_len - len(tree))
    mask[vocab.sep_id] = False
    return mask


def stop_probability(tree: ExprTree, vocab: Vocabulary, max_len: int) -> float:
    """Effective stop probability: forced to 1 when no token can extend the tree."""
    p = early_stop_prob(tree, max_len)
    if not _policy_mask(tree, vocab, max_len).any():
        return 1.0
    return p


def _draw(logp: np.ndarray, u: float) -> int:
    p = np.exp(logp)
    cdf = np.cumsum(p)
    i = min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(p) - 1)
    if p[i] == 0:
        # rounding at the top of the cdf; fall back to the last legal token below
        legal = np.flatnonzero(p > 0)
        below = legal[legal <= i]
        i = int(below[-1] if len(below) else legal[0])
    return i


def sample_step(net: PolicyNet, tree: ExprTree, rng: np.random.Generator,
                max_len: int = 20) -> tuple[int, float, float, np.ndarray | None]:
    """One draw at ``tree``: (action id, its log-probability, stop-decision log term, mask).

    The mask is None when the draw was Sep.
    """
    vocab = net.vocab
    cont = 0.0
    if tree.is_complete:
        p = stop_probability(tree, vocab, max_len)
        if rng.random() < p:
            return vocab.sep_id, math.log(p), math.log(p), None
        cont = math.log1p(-p)
    mask = _policy_mask(tree, vocab, max_len)
    with T.no_grad():
        lp = net.log_probs([tree], mask).data[0]
    a = _draw(lp, rng.random())
    return a, float(lp[a]) + cont, cont, mask


def sample_trajectory(net: PolicyNet, rng: np.random.Generator, max_len: int = 20,
                      embed_terminal: bool = True) -> Trajectory:
    vocab = net.vocab
    tree = EMPTY
    states, actions, log_pf, stop_log, masks = [], [], [], [], []
    stopped_early = False
    while True:
        states.append(tree)
        a, lp, cont, mask = sample_step(net, tree, rng, max_len)
        actions.append(a)
        log_pf.append(lp)
        stop_log.append(cont)
        if mask is None:
            stopped_early = lp < 0.0
            break
        masks.append(mask)
        tree = tree.apply(vocab.tokens[a])
    emb = None
    if embed_terminal:
        with T.no_grad():
            emb = net.embed([tree]).data[0].copy()
    return Trajectory(states, actions, log_pf, stop_log, masks, stopped_early, tree, emb)


def replay(net: PolicyNet, tree: ExprTree, max_len: int = 20) -> Trajectory:
    """The unique trajectory ending in ``tree``, with its forward log-probabilities."""
    vocab = net.vocab
    seq = construction_sequence(tree)
    if len(seq) > max_len:
        raise ValueError("tree longer than max_len")
    state = EMPTY
    states, actions, log_pf, stop_log, masks = [], [], [], [], []
    for tok in seq:
        states.append(state)
        cont = 0.0
        if state.is_complete:
            p = stop_probability(state, vocab, max_len)
            if p >= 1.0:
                raise ValueError("trajectory would have been forced to stop")
            cont = math.log1p(-p)
        mask = _policy_mask(state, vocab, max_len)
        a = vocab.index(tok)
        if not mask[a]:
            raise ValueError(f"{tok} is not legal at {to_infix(state)}")
        with T.no_grad():
            lp = net.log_probs([state], mask).data[0]
        actions.append(a)
        log_pf.append(float(lp[a]) + cont)
        stop_log.append(cont)
        masks.append(mask)
        state = state.apply(tok)
    states.append(state)
    p = stop_probability(state, vocab, max_len)
    actions.append(vocab.sep_id)
    log_pf.append(math.log(p))
    stop_log.append(math.log(p))
    with T.no_grad():
        emb = net.embed([state]).data[0].copy()
    return Trajectory(states, actions, log_pf, stop_log, masks, p < 1.0, state, emb)


def log_forward(traj: Trajectory) -> float:
    if not traj.complete:
        raise ValueError("incomplete trajectory")
    return float(sum(traj.log_pf))


def log_backward(traj: Trajectory) -> float:
    if not traj.complete:
        raise ValueError("incomplete trajectory")
    return 0.0


def trajectory_terms(net: PolicyNet, traj: Trajectory) -> tuple[Tensor, Tensor]:
    """Differentiable sum of forward log-probabilities and the summed per-step policy entropy."""
    n_tok = len(traj.masks)
    const = float(sum(traj.stop_log))
    if n_tok == 0:
        zero = Tensor(0.0)
        return T.add(zero, const), zero
    states = traj.states[:n_tok]
    masks = np.stack(traj.masks)
    lp = policy_log_probs(net.logits(net.embed(states)), masks)
    picked = T.pick(lp, np.arange(n_tok), traj.actions[:n_tok])
    log_pf = T.add(T.tsum(picked), const)
    ent = T.tsum(T.masked_entropy(lp, masks))
    return log_pf, ent


def iter_terminals(net: PolicyNet, max_len: int) -> Iterator[tuple[ExprTree, float]]:
    """Every reachable terminal with its exact forward log-probability (small vocabularies only)."""
    vocab = net.vocab

    def walk(tree: ExprTree, acc: float):
        cont = 0.0
        if tree.is_complete:
            p = stop_probability(tree, vocab, max_len)
            yield tree, acc + math.log(p)
            if p >= 1.0:
                return
            cont = math.log1p(-p)
        mask = _policy_mask(tree, vocab, max_len)
        with T.no_grad():
            lp = net.log_probs([tree], mask).data[0]
        for a in np.flatnonzero(mask):
            yield from walk(tree.apply(vocab.tokens[a]), acc + cont + float(lp[a]))

    yield from walk(EMPTY, 0.0)


def dump_trajectory(traj: Trajectory, vocab: Vocabulary) -> str:
    """One line per step: state, chosen token, log-probability."""
    lines = []
    for s, a, lp in zip(traj.states, traj.actions, traj.log_pf):
        lines.append(f"{to_infix(s)}\t{vocab.tokens[a].name}\t{lp:.12g}")
    return "\n".join(lines) + "\n"
