import numpy as np
import pytest

from flowalpha import tensor as T
from flowalpha.checkpoint import CheckpointError, load_arrays, save_arrays
from flowalpha.formula import EMPTY, ExprTree, Node, full_vocabulary, parse_rpn
from flowalpha.policy import PolicyNet, build_batch, policy_log_probs, rgcn_forward

V = full_vocabulary()


def _reorder(tree: ExprTree, order):
    """Same tree with node storage permuted by ``order`` (new position -> old index)."""
    inv = {old: new for new, old in enumerate(order)}
    nodes = tuple(Node(tree.nodes[old].token,
                       tuple(None if c is None else inv[c] for c in tree.nodes[old].children))
                  for old in order)
    return ExprTree(nodes, inv[tree.root])


def test_identity_self_loop_returns_token_embedding():
    net = PolicyNet(V, hidden=6, layers=2, seed=0)
    for k, p in net.params.items():
        if "/rel" in k:
            p.data[:] = 0.0
        elif k.endswith("/self"):
            p.data[:] = np.eye(6)
    net.params["embed"].data[:] = np.abs(net.params["embed"].data)
    _, emb = rgcn_forward(parse_rpn("close"), net)
    assert np.array_equal(emb, net.params["embed"].data[V.index(V.token("close"))])


def test_identical_trees_identical_embeddings():
    net = PolicyNet(V, hidden=16, seed=1)
    a = net.embed([parse_rpn("close 10 TsMean volume Div")]).data
    b = net.embed([parse_rpn("close 10 TsMean volume Div")]).data
    assert np.array_equal(a, b)


def test_storage_order_invariance():
    net = PolicyNet(V, hidden=16, seed=2)
    t = parse_rpn("close open Sub 10 TsStd volume 5 TsMean Mul")
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = _reorder(t, list(rng.permutation(len(t))))
        assert u == t
        np.testing.assert_allclose(net.embed([u]).data, net.embed([t]).data, atol=1e-12)


def test_commutative_symmetry():
    net = PolicyNet(V, hidden=16, seed=3)
    a = net.embed([parse_rpn("close open Add")]).data
    b = net.embed([parse_rpn("open close Add")]).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    c = net.embed([parse_rpn("close open Sub")]).data
    d = net.embed([parse_rpn("open close Sub")]).data
    assert not np.allclose(c, d)


def test_empty_tree_uses_start_vector():
    net = PolicyNet(V, hidden=8, seed=4)
    e = net.embed([EMPTY, parse_rpn("close"), EMPTY]).data
    assert np.array_equal(e[0], net.params["start"].data)
    assert np.array_equal(e[2], net.params["start"].data)


def test_batch_matches_single():
    net = PolicyNet(V, hidden=8, seed=5)
    trees = [parse_rpn("close"), parse_rpn("close open Sub"), EMPTY, parse_rpn("close 5 TsMean Abs")]
    batched = net.embed(trees).data
    for i, t in enumerate(trees):
        np.testing.assert_allclose(batched[i], net.embed([t]).data[0], atol=1e-14)


def test_adjacency_normalisation():
    b = build_batch([parse_rpn("close open Add")], V)
    A = b.adjacency[1].toarray()
    # the root sees two commutative neighbours, each leaf sees one
    assert A[2].tolist() == [0.5, 0.5, 0.0]
    assert A[0].tolist() == [0.0, 0.0, 1.0]


def test_empty_mask_is_a_hard_fault():
    with pytest.raises(RuntimeError):
        policy_log_probs(T.Tensor(np.zeros((1, 3))), np.zeros((1, 3), bool))


def test_checkpoint_round_trip(tmp_path):
    net = PolicyNet(V, hidden=8, seed=6)
    net.save(tmp_path / "w.bin")
    other = PolicyNet(V, hidden=8, seed=7)
    other.load(tmp_path / "w.bin")
    for k in net.params:
        assert np.array_equal(net.params[k].data, other.params[k].data)
    with pytest.raises(ValueError):
        PolicyNet(V, hidden=9).load(tmp_path / "w.bin")


def test_checkpoint_layout(tmp_path):
    save_arrays(tmp_path / "a.bin", {"x": np.arange(6.0).reshape(2, 3)})
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:4] == b"FAWT"
    assert len(raw) == 4 + 2 + 4 + 2 + 1 + 1 + 2 * 8 + 6 * 8
    assert np.array_equal(load_arrays(tmp_path / "a.bin")["x"], np.arange(6.0).reshape(2, 3))
    (tmp_path / "b.bin").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "b.bin")
    (tmp_path / "c.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "c.bin")
