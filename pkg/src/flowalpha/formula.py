"""Token vocabulary, expression trees, RPN text form and action masking.

Trees are grown one token at a time.  The chain of operators along the
left spine is built by *wrapping*: once the tree is complete, an operator
may take the whole tree as its first data argument.  Every other argument
slot is filled top-down, earliest open slot first.  Under this order each
tree has exactly one construction sequence, so every state has a unique
parent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class Kind(enum.IntEnum):
    FEATURE = 0
    UNARY = 1
    BINARY = 2
    ROLLING_UNARY = 3
    ROLLING_BINARY = 4
    WINDOW = 5
    SEP = 6


class Relation(enum.IntEnum):
    UNARY_OPERAND = 0
    COMMUTATIVE_OPERAND = 1
    NONCOMMUTATIVE_LEFT = 2
    NONCOMMUTATIVE_RIGHT = 3
    ROLLING_FEATURE_OPERAND = 4
    ROLLING_TIME_OPERAND = 5


N_RELATIONS = len(Relation)

FEATURES = ("open", "close", "high", "low", "vwap", "volume")
UNARY_OPS = ("Abs", "Slog1p", "Inv", "Sign", "Log", "Rank")
BINARY_OPS = ("Add", "Sub", "Mul", "Div", "Pow", "Greater", "Less")
ROLLING_UNARY_OPS = (
    "Ref", "TsMean", "TsSum", "TsStd", "TsIr", "TsMinMaxDiff", "TsMaxDiff",
    "TsMinDiff", "TsVar", "TsSkew", "TsKurt", "TsMax", "TsMin", "TsMed",
    "TsMad", "TsRank", "TsDelta", "TsDiv", "TsPctChange", "TsWMA", "TsEMA",
)
ROLLING_BINARY_OPS = ("TsCov", "TsCorr")
WINDOWS = (1, 5, 10, 20, 30, 40, 50)

COMMUTATIVE = frozenset({"Add", "Mul", "TsCov", "TsCorr"})

# Data arguments and window arguments per operator kind.
_ARITY = {
    Kind.FEATURE: (0, 0),
    Kind.WINDOW: (0, 0),
    Kind.UNARY: (1, 0),
    Kind.BINARY: (2, 0),
    Kind.ROLLING_UNARY: (1, 1),
    Kind.ROLLING_BINARY: (2, 1),
}


class SlotKind(enum.IntEnum):
    DATA = 0
    WINDOW = 1


@dataclass(frozen=True, order=True)
class Token:
    kind: Kind
    name: str

    @property
    def window(self) -> int:
        if self.kind is not Kind.WINDOW:
            raise AttributeError(f"{self.name} is not a window token")
        return int(self.name)

    @property
    def is_operator(self) -> bool:
        return self.kind in (Kind.UNARY, Kind.BINARY, Kind.ROLLING_UNARY, Kind.ROLLING_BINARY)

    @property
    def slot_kinds(self) -> tuple[SlotKind, ...]:
        n_data, n_win = _ARITY.get(self.kind, (0, 0))
        return (SlotKind.DATA,) * n_data + (SlotKind.WINDOW,) * n_win

    def __str__(self) -> str:
        return self.name


SEP = Token(Kind.SEP, "SEP")


def _all_tokens(features=FEATURES, unary=UNARY_OPS, binary=BINARY_OPS,
                rolling_unary=ROLLING_UNARY_OPS, rolling_binary=ROLLING_BINARY_OPS,
                windows=WINDOWS) -> list[Token]:
    toks = [Token(Kind.FEATURE, f) for f in features]
    toks += [Token(Kind.UNARY, o) for o in unary]
    toks += [Token(Kind.BINARY, o) for o in binary]
    toks += [Token(Kind.ROLLING_UNARY, o) for o in rolling_unary]
    toks += [Token(Kind.ROLLING_BINARY, o) for o in rolling_binary]
    toks += [Token(Kind.WINDOW, str(int(w))) for w in windows]
    toks.append(SEP)
    return toks


class Vocabulary:
    """Ordered token set; the index of a token is its action id."""

    def __init__(self, features: Sequence[str] = FEATURES, unary: Sequence[str] = UNARY_OPS,
                 binary: Sequence[str] = BINARY_OPS,
                 rolling_unary: Sequence[str] = ROLLING_UNARY_OPS,
                 rolling_binary: Sequence[str] = ROLLING_BINARY_OPS,
                 windows: Sequence[int] = WINDOWS):
        for name, allowed, given in (("feature", FEATURES, features), ("unary", UNARY_OPS, unary),
                                     ("binary", BINARY_OPS, binary),
                                     ("rolling unary", ROLLING_UNARY_OPS, rolling_unary),
                                     ("rolling binary", ROLLING_BINARY_OPS, rolling_binary)):
            bad = set(given) - set(allowed)
            if bad:
                raise ValueError(f"unknown {name} tokens: {sorted(bad)}")
        if not features:
            raise ValueError("vocabulary needs at least one feature")
        if (rolling_unary or rolling_binary) and not windows:
            raise ValueError("rolling operators need at least one window")
        if any(int(w) < 1 for w in windows):
            raise ValueError("windows must be positive day counts")
        self.tokens: tuple[Token, ...] = tuple(_all_tokens(features, unary, binary, rolling_unary,
                                                           rolling_binary, windows))
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self._by_name = {t.name: t for t in self.tokens}
        self.kinds = np.array([t.kind for t in self.tokens], dtype=np.int64)
        self.sep_id = self._index[SEP]
        self.extra_slots = np.array([len(t.slot_kinds) for t in self.tokens], dtype=np.int64)

    @classmethod
    def full(cls) -> "Vocabulary":
        return cls()

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, token: Token) -> bool:
        return token in self._index

    def index(self, token: Token) -> int:
        return self._index[token]

    def token(self, name: str | int) -> Token:
        key = str(name)
        try:
            return self._by_name[key]
        except KeyError:
            raise RPNError(f"unknown token {key!r}") from None

    def ids_of_kind(self, *kinds: Kind) -> np.ndarray:
        return np.flatnonzero(np.isin(self.kinds, [int(k) for k in kinds]))

    def describe(self) -> dict:
        by = lambda k: [t.name for t in self.tokens if t.kind is k]  # noqa: E731
        return {"features": by(Kind.FEATURE), "unary": by(Kind.UNARY), "binary": by(Kind.BINARY),
                "rolling_unary": by(Kind.ROLLING_UNARY),
                "rolling_binary": by(Kind.ROLLING_BINARY),
                "windows": [int(n) for n in by(Kind.WINDOW)]}


class RPNError(ValueError):
    """Malformed RPN text or an illegal tree edit."""


@dataclass(frozen=True)
class Node:
    token: Token
    children: tuple[int | None, ...] = ()


@dataclass(frozen=True)
class Slot:
    node: int
    position: int
    kind: SlotKind


@dataclass(frozen=True, eq=False)
class ExprTree:
    """Possibly partial expression tree; ``None`` children are open slots."""

    nodes: tuple[Node, ...] = ()
    root: int | None = None

    # structure ---------------------------------------------------------
    def _key(self, i: int | None):
        if i is None:
            return None
        n = self.nodes[i]
        return (n.token.kind, n.token.name, tuple(self._key(c) for c in n.children))

    @cached_property
    def structure(self):
        """Nested tuple independent of node storage order."""
        return self._key(self.root)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExprTree) and self.structure == other.structure

    def __hash__(self) -> int:
        return hash(self.structure)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def is_empty(self) -> bool:
        return self.root is None

    @cached_property
    def open_slots(self) -> tuple[Slot, ...]:
        """Unfilled argument positions, leftmost-first (the fill order)."""
        out: list[Slot] = []

        def walk(i):
            node = self.nodes[i]
            kinds = node.token.slot_kinds
            for pos, c in enumerate(node.children):
                if c is None:
                    out.append(Slot(i, pos, kinds[pos]))
                else:
                    walk(c)

        if self.root is not None:
            walk(self.root)
        return tuple(out)

    @property
    def is_complete(self) -> bool:
        return self.root is not None and not self.open_slots

    def next_slot(self) -> Slot | None:
        slots = self.open_slots
        return slots[0] if slots else None

    # edits --------------------------------------------------------------
    def apply(self, token: Token) -> "ExprTree":
        """Place ``token`` at the next construction position."""
        if token.kind is Kind.SEP:
            raise RPNError("SEP does not edit a tree")
        nodes = list(self.nodes)
        new = Node(token, (None,) * len(token.slot_kinds))
        if self.root is None:
            if token.kind is not Kind.FEATURE:
                raise RPNError(f"{token} cannot start an expression")
            return ExprTree((new,), 0)
        slot = self.next_slot()
        if slot is None:
            if not token.is_operator:
                raise RPNError(f"{token} cannot extend a complete expression")
            nodes.append(Node(token, (self.root,) + (None,) * (len(token.slot_kinds) - 1)))
            return ExprTree(tuple(nodes), len(nodes) - 1)
        want = SlotKind.WINDOW if token.kind is Kind.WINDOW else SlotKind.DATA
        if want is not slot.kind:
            raise RPNError(f"{token} does not fit a {slot.kind.name.lower()} slot")
        nodes.append(new)
        parent = nodes[slot.node]
        kids = list(parent.children)
        kids[slot.position] = len(nodes) - 1
        nodes[slot.node] = Node(parent.token, tuple(kids))
        return ExprTree(tuple(nodes), self.root)

    # traversal ----------------------------------------------------------
    def postorder(self) -> list[int]:
        out: list[int] = []

        def walk(i):
            for c in self.nodes[i].children:
                if c is not None:
                    walk(c)
            out.append(i)

        if self.root is not None:
            walk(self.root)
        return out

    def subtree(self, i: int) -> "ExprTree":
        """Copy of the subtree rooted at node ``i`` (post-order storage)."""
        nodes: list[Node] = []

        def copy(j):
            kids = tuple(None if c is None else copy(c) for c in self.nodes[j].children)
            nodes.append(Node(self.nodes[j].token, kids))
            return len(nodes) - 1

        r = copy(i)
        return ExprTree(tuple(nodes), r)

    def windows(self) -> list[int]:
        return [n.token.window for n in self.nodes if n.token.kind is Kind.WINDOW]

    def __repr__(self) -> str:
        if self.root is None:
            return "ExprTree(<empty>)"
        return f"ExprTree({to_infix(self)})"

    def __str__(self) -> str:
        return to_rpn(self, canonical=False) if self.is_complete else repr(self)


EMPTY = ExprTree()


def leaf(token: Token) -> ExprTree:
    return ExprTree((Node(token, ()),), 0)


def make(token: Token, *children: ExprTree) -> ExprTree:
    """Compose a complete tree from complete children."""
    if len(children) != len(token.slot_kinds):
        raise RPNError(f"{token} takes {len(token.slot_kinds)} arguments")
    nodes: list[Node] = []
    roots = []
    for ch in children:
        off = len(nodes)
        for n in ch.nodes:
            nodes.append(Node(n.token, tuple(None if c is None else c + off for c in n.children)))
        roots.append(ch.root + off)
    nodes.append(Node(token, tuple(roots)))
    return ExprTree(tuple(nodes), len(nodes) - 1)


# --------------------------------------------------------------------------
# RPN text
# --------------------------------------------------------------------------

def _rpn_tokens(tree: ExprTree, i: int, canonical: bool) -> list[str]:
    node = tree.nodes[i]
    if any(c is None for c in node.children):
        raise RPNError("cannot print a partial tree")
    parts = [_rpn_tokens(tree, c, canonical) for c in node.children]
    if canonical and node.token.name in COMMUTATIVE:
        n_data = _ARITY[node.token.kind][0]
        data = sorted(parts[:n_data], key=lambda p: " ".join(p))
        parts = data + parts[n_data:]
    out: list[str] = []
    for p in parts:
        out.extend(p)
    out.append(node.token.name)
    return out


def to_rpn(tree: ExprTree, canonical: bool = True) -> str:
    """Whitespace-separated post-order text; commutative operands sorted when canonical."""
    if tree.root is None:
        raise RPNError("empty tree")
    return " ".join(_rpn_tokens(tree, tree.root, canonical))


def to_infix(tree: ExprTree) -> str:
    def fmt(i):
        if i is None:
            return "_"
        n = tree.nodes[i]
        if not n.children:
            return n.token.name
        return f"{n.token.name}({', '.join(fmt(c) for c in n.children)})"

    return fmt(tree.root) if tree.root is not None else "<empty>"


def parse_rpn(text: str | Iterable[str], vocab: Vocabulary | None = None) -> ExprTree:
    vocab = vocab or _FULL
    words = text.split() if isinstance(text, str) else list(text)
    if not words:
        raise RPNError("empty expression")
    nodes: list[Node] = []
    stack: list[tuple[int, SlotKind]] = []
    for w in words:
        tok = vocab.token(w)
        if tok.kind is Kind.SEP:
            raise RPNError("SEP is not part of an expression")
        if tok.kind in (Kind.FEATURE, Kind.WINDOW):
            nodes.append(Node(tok, ()))
            stack.append((len(nodes) - 1, SlotKind.WINDOW if tok.kind is Kind.WINDOW else SlotKind.DATA))
            continue
        want = tok.slot_kinds
        if len(stack) < len(want):
            raise RPNError(f"stack underflow at {w!r}")
        args = stack[len(stack) - len(want):]
        del stack[len(stack) - len(want):]
        for (idx, got), need in zip(args, want):
            if got is not need:
                raise RPNError(f"{w!r} expects a {need.name.lower()} argument, got "
                               f"{nodes[idx].token.name!r}")
        nodes.append(Node(tok, tuple(a for a, _ in args)))
        stack.append((len(nodes) - 1, SlotKind.DATA))
    if len(stack) != 1:
        raise RPNError(f"{len(stack)} items left on the stack")
    if stack[0][1] is not SlotKind.DATA:
        raise RPNError("a bare window is not an expression")
    return ExprTree(tuple(nodes), stack[0][0])


def canonical(tree: ExprTree) -> ExprTree:
    return parse_rpn(to_rpn(tree, canonical=True))


# --------------------------------------------------------------------------
# relations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RelationEdge:
    parent: int
    child: int
    relation: Relation


def _relation(token: Token, position: int) -> Relation:
    k = token.kind
    if k is Kind.UNARY:
        return Relation.UNARY_OPERAND
    if k is Kind.BINARY:
        if token.name in COMMUTATIVE:
            return Relation.COMMUTATIVE_OPERAND
        return Relation.NONCOMMUTATIVE_LEFT if position == 0 else Relation.NONCOMMUTATIVE_RIGHT
    if k in (Kind.ROLLING_UNARY, Kind.ROLLING_BINARY):
        if position == len(token.slot_kinds) - 1:
            return Relation.ROLLING_TIME_OPERAND
        return Relation.ROLLING_FEATURE_OPERAND
    raise ValueError(f"{token} has no operands")


def relation_edges(tree: ExprTree) -> list[RelationEdge]:
    """Typed parent->child edges in pre-order; open slots contribute nothing."""
    edges: list[RelationEdge] = []
    if tree.root is None:
        return edges
    stack = [tree.root]
    while stack:
        i = stack.pop()
        node = tree.nodes[i]
        for pos, c in enumerate(node.children):
            if c is not None:
                edges.append(RelationEdge(i, c, _relation(node.token, pos)))
        stack.extend(c for c in reversed(node.children) if c is not None)
    return edges


def slot_relations(tree: ExprTree) -> list[tuple[int, Relation]]:
    """(parent node, relation) for every open slot, in fill order."""
    return [(sl.node, _relation(tree.nodes[sl.node].token, sl.position)) for sl in tree.open_slots]


# --------------------------------------------------------------------------
# masking
# --------------------------------------------------------------------------

def completion_cost(tree: ExprTree) -> int:
    """Fewest tokens still needed to make the tree complete."""
    if tree.root is None:
        return 1
    return len(tree.open_slots)


def legal_actions(tree: ExprTree, vocab: Vocabulary, budget: int) -> np.ndarray:
    """Boolean mask over ``vocab``; ``budget`` is MaxLen minus the current length."""
    mask = np.zeros(len(vocab), dtype=bool)
    kinds = vocab.kinds
    if tree.root is None:
        if budget >= 1:
            mask[kinds == Kind.FEATURE] = True
        return mask
    slots = tree.open_slots
    if not slots:
        mask[vocab.sep_id] = True
        ops = np.isin(kinds, [Kind.UNARY, Kind.BINARY, Kind.ROLLING_UNARY, Kind.ROLLING_BINARY])
        # wrapping reuses the tree as the first data argument
        mask |= ops & (vocab.extra_slots <= budget)
        return mask
    rest = len(slots) - 1
    if slots[0].kind is SlotKind.WINDOW:
        if 1 + rest <= budget:
            mask[kinds == Kind.WINDOW] = True
        return mask
    fill = np.isin(kinds, [Kind.FEATURE, Kind.UNARY, Kind.BINARY, Kind.ROLLING_UNARY,
                           Kind.ROLLING_BINARY])
    mask |= fill & (1 + rest + vocab.extra_slots <= budget)
    return mask


def construction_sequence(tree: ExprTree) -> list[Token]:
    """The unique token sequence that builds a complete ``tree`` from empty."""
    if not tree.is_complete:
        raise RPNError("construction sequence needs a complete tree")

    def prefix(i):
        n = tree.nodes[i]
        out = [n.token]
        for c in n.children:
            out.extend(prefix(c))
        return out

    spine = [tree.root]
    while tree.nodes[spine[-1]].children:
        spine.append(tree.nodes[spine[-1]].children[0])
    seq = [tree.nodes[spine[-1]].token]
    for i in reversed(spine[:-1]):
        n = tree.nodes[i]
        seq.append(n.token)
        for c in n.children[1:]:
            seq.extend(prefix(c))
    return seq


_FULL = Vocabulary()


def full_vocabulary() -> Vocabulary:
    return _FULL


def random_tree(rng: np.random.Generator, vocab: Vocabulary | None = None,
                max_len: int = 20, stop_bias: float = 0.3) -> ExprTree:
    """Uniformly-masked random construction; handy for property tests and smoke runs."""
    vocab = vocab or _FULL
    tree = EMPTY
    while True:
        mask = legal_actions(tree, vocab, max_len - len(tree))
        if tree.is_complete and (rng.random() < stop_bias or mask.sum() == 1):
            return tree
        mask[vocab.sep_id] = False
        ids = np.flatnonzero(mask)
        tree = tree.apply(vocab.tokens[ids[rng.integers(len(ids))]])
