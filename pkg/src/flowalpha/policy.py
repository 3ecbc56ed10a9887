"""Relation-typed graph encoder over (partial) expression trees plus the action head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .formula import N_RELATIONS, ExprTree, Vocabulary, relation_edges, slot_relations
from .tensor import Tensor


@dataclass
class GraphBatch:
    """Several trees packed as one block-diagonal graph.

    Each open slot of a partial tree is a node of its own (token id
    ``len(vocab)``, the learned "hole" row) linked to its parent by the
    slot's relation, so partial and complete states never share a graph.
    """

    token_ids: np.ndarray
    adjacency: list[sp.csr_matrix | None]
    segments: np.ndarray
    n_graphs: int
    state_rows: np.ndarray  # per state: row of the readout table; n_graphs means "start"


def build_batch(trees: Sequence[ExprTree], vocab: Vocabulary) -> GraphBatch:
    ids: list[int] = []
    segs: list[int] = []
    rows, cols, rels = [], [], []
    state_rows = np.empty(len(trees), dtype=np.int64)
    g = 0
    for s, tree in enumerate(trees):
        if tree.is_empty:
            state_rows[s] = -1
            continue
        off = len(ids)
        ids.extend(vocab.index(n.token) for n in tree.nodes)
        edges = [(e.parent, e.child, e.relation) for e in relation_edges(tree)]
        for parent, rel in slot_relations(tree):
            edges.append((parent, len(ids) - off, rel))
            ids.append(len(vocab))
        segs.extend([g] * (len(ids) - off))
        for parent, child, rel in edges:
            # messages flow both ways along an edge, under the same relation
            rows += [off + parent, off + child]
            cols += [off + child, off + parent]
            rels += [int(rel), int(rel)]
        state_rows[s] = g
        g += 1
    state_rows[state_rows < 0] = g
    n = len(ids)
    rows_a, cols_a, rels_a = np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(rels)
    adjacency: list[sp.csr_matrix | None] = []
    for r in range(N_RELATIONS):
        sel = rels_a == r
        if not sel.any():
            adjacency.append(None)
            continue
        rr, cc = rows_a[sel], cols_a[sel]
        deg = np.bincount(rr, minlength=n).astype(np.float64)
        A = sp.csr_matrix((1.0 / deg[rr], (rr, cc)), shape=(n, n))
        adjacency.append(A)
    return GraphBatch(np.array(ids, dtype=np.int64), adjacency, np.array(segs, dtype=np.int64),
                      g, state_rows)


def init_params(vocab_size: int, hidden: int = 128, layers: int = 2,
                seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    V, h = vocab_size, hidden
    p: dict[str, np.ndarray] = {
        "embed": T.xavier(rng, V, h),
        "start": T.xavier(rng, V, h, shape=(h,)),
    }
    for layer in range(layers):
        for r in range(N_RELATIONS):
            p[f"layer{layer}/rel{r}"] = T.xavier(rng, h, h)
        p[f"layer{layer}/self"] = T.xavier(rng, h, h)
    p["head/w"] = T.xavier(rng, h, V)
    p["head/b"] = np.zeros(V)
    p["logZ"] = np.array(0.0)
    p["hole"] = T.xavier(rng, V, h, shape=(h,))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def rgcn_nodes(batch: GraphBatch, params: dict[str, Tensor], layers: int) -> Tensor | None:
    if len(batch.token_ids) == 0:
        return None
    h = params["hole"].shape[0]
    table = T.concat_rows([params["embed"], T.reshape(params["hole"], (1, h))])
    H = T.gather_rows(table, batch.token_ids)
    for layer in range(layers):
        M = H @ params[f"layer{layer}/self"]
        for r, A in enumerate(batch.adjacency):
            if A is not None:
                M = M + T.spmm(A, H) @ params[f"layer{layer}/rel{r}"]
        H = T.relu(M)
    return H


def rgcn_embed(batch: GraphBatch, params: dict[str, Tensor], layers: int) -> Tensor:
    """Per-state embeddings: max-pool of final node states, or the start vector for empty trees."""
    h = params["start"].shape[0]
    start = T.reshape(params["start"], (1, h))
    H = rgcn_nodes(batch, params, layers)
    if H is None:
        table = start
    else:
        table = T.concat_rows([T.segment_max(H, batch.segments, batch.n_graphs), start])
    return T.gather_rows(table, batch.state_rows)


class PolicyNet:
    """Graph encoder, action head and the scalar log-partition estimate."""

    def __init__(self, vocab: Vocabulary, hidden: int = 128, layers: int = 2, seed: int = 0):
        self.vocab = vocab
        self.hidden = hidden
        self.layers = layers
        self.params = init_params(len(vocab), hidden, layers, seed)

    @property
    def log_z(self) -> Tensor:
        return self.params["logZ"]

    def embed(self, trees: Sequence[ExprTree]) -> Tensor:
        return rgcn_embed(build_batch(trees, self.vocab), self.params, self.layers)

    def node_states(self, tree: ExprTree) -> np.ndarray:
        H = rgcn_nodes(build_batch([tree], self.vocab), self.params, self.layers)
        return np.zeros((0, self.hidden)) if H is None else H.data

    def logits(self, emb: Tensor) -> Tensor:
        return emb @ self.params["head/w"] + self.params["head/b"]

    def log_probs(self, trees: Sequence[ExprTree], masks: np.ndarray) -> Tensor:
        return policy_log_probs(self.logits(self.embed(trees)), masks)

    # persistence -----------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out["meta/dims"] = np.array([len(self.vocab), self.hidden, self.layers], dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        V, h, L = (int(x) for x in arrays["meta/dims"])
        if (V, h, L) != (len(self.vocab), self.hidden, self.layers):
            raise ValueError(f"checkpoint dims {(V, h, L)} do not match the policy")
        for k, p in self.params.items():
            p.data = arrays[f"param/{k}"].reshape(p.shape).copy()

    def save(self, path: str | Path) -> None:
        save_arrays(path, self.arrays())

    def load(self, path: str | Path) -> None:
        self.load_arrays(load_arrays(path))


def policy_log_probs(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Masked log-probabilities; illegal actions get -inf."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 1:
        masks = masks[None, :]
    if not masks.any(axis=-1).all():
        raise RuntimeError("empty action mask: no legal token in a reachable state")
    return T.masked_log_softmax(logits, masks)


def rgcn_forward(tree: ExprTree, net: PolicyNet) -> tuple[np.ndarray, np.ndarray]:
    """Node states and pooled embedding of a single tree (no gradient)."""
    with T.no_grad():
        return net.node_states(tree), net.embed([tree]).data[0]
