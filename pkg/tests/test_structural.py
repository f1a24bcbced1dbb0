import math

import numpy as np
import pytest

from dynbot import autodiff as ad
from dynbot import structural as S
from dynbot.autodiff import Tensor
from dynbot.dyngraph import SnapshotConfig, build_snapshots, records_from_edges
from oracles import dense_neighbors, leaky, random_records, softmax_masked


def make_params(cfg, rng, scale=0.5):
    return {
        name: Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)
        for name, shape in S.param_names(cfg)
    }


def snapshot_of(edges, n):
    return build_snapshots(records_from_edges(edges), SnapshotConfig(interval=1), num_nodes=n).snapshots[0]


def random_snapshot(rng, n, m):
    recs = random_records(rng, n, m)
    return build_snapshots(recs, SnapshotConfig(interval=1e6), num_nodes=n).snapshots[0]


def dense_layer(h, snap, params, cfg, layer):
    """Materialize exp(QK^T/sqrt(d)) per head, mask non-edges, row-normalize, aggregate."""
    n, d = h.shape
    nbrs = dense_neighbors(snap.edges, n)
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        mask[i, list(nbrs[i])] = True
        mask[i, i] = cfg.self_loops or mask[i, i]
    heads, alphas = [], []
    for c in range(cfg.num_heads):
        pre = f"structural.l{layer}.h{c}"
        q = h @ params[f"{pre}.W_q"].data.T + params[f"{pre}.b_q"].data
        k = h @ params[f"{pre}.W_k"].data.T + params[f"{pre}.b_k"].data
        v = h @ params[f"{pre}.W_v"].data.T + params[f"{pre}.b_v"].data
        alpha = softmax_masked(q @ k.T / math.sqrt(d), mask)
        alphas.append(alpha)
        heads.append(leaky(alpha @ v))
    return np.concatenate(heads, axis=1), alphas


def test_encode_input_examples():
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=3, num_heads=1)
    params = {"structural.W_I": Tensor(np.eye(3)), "structural.b_I": Tensor(np.zeros(3))}
    x = np.array([[0.5, 1.0, 2.0], [3.0, 0.1, 0.2]])
    np.testing.assert_array_equal(S.encode_input(Tensor(x), params, cfg).data, x)
    np.testing.assert_array_equal(S.encode_input(Tensor(np.zeros((2, 3))), params, cfg).data, 0)


def test_encode_input_dense_oracle():
    rng = np.random.default_rng(0)
    cfg = S.StructuralConfig(input_dim=5, hidden_dim=8, num_heads=2)
    params = make_params(cfg, rng)
    x = rng.normal(size=(6, 5))
    expected = leaky(x @ params["structural.W_I"].data.T + params["structural.b_I"].data)
    np.testing.assert_allclose(S.encode_input(Tensor(x), params, cfg).data, expected, rtol=1e-13)
    with pytest.raises(ValueError, match="feature width"):
        S.encode_input(Tensor(np.ones((2, 4))), params, cfg)


def test_message_edges_collapse_and_self_loops():
    snap = snapshot_of([(0, 1), (1, 0), (2, 1)], 4)
    src, dst = S.message_edges(snap)
    pairs = list(zip(dst.tolist(), src.tolist()))
    assert pairs == sorted(pairs)
    assert set(pairs) == {(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2), (3, 3)}
    src, dst = S.message_edges(snap, self_loops=False, offset=10)
    assert (10, 10) not in set(zip(dst.tolist(), src.tolist()))
    assert dst.min() >= 10


def test_attention_uniform_when_keys_equal():
    cfg = S.StructuralConfig(input_dim=2, hidden_dim=4, num_heads=1, num_layers=1)
    rng = np.random.default_rng(1)
    params = make_params(cfg, rng)
    params["structural.l0.h0.W_k"] = Tensor(np.zeros((4, 4)))
    snap = snapshot_of([(0, 1), (0, 2), (0, 3)], 4)
    edges = S.message_edges(snap)
    alpha = S.attention_weights(Tensor(rng.normal(size=(4, 4))), edges, params, 0, 0).data
    src, dst = edges
    np.testing.assert_allclose(alpha[dst == 0], 0.25)


def test_isolated_node_attends_to_itself():
    cfg = S.StructuralConfig(input_dim=2, hidden_dim=4, num_heads=2, num_layers=1)
    rng = np.random.default_rng(2)
    params = make_params(cfg, rng)
    snap = snapshot_of([(0, 1)], 3)
    edges = S.message_edges(snap)
    for head in range(2):
        alpha = S.attention_weights(Tensor(rng.normal(size=(3, 4))), edges, params, 0, head).data
        assert alpha[edges[1] == 2].tolist() == [1.0]


def test_attention_and_layer_match_dense_oracle():
    rng = np.random.default_rng(3)
    cfg = S.StructuralConfig(input_dim=4, hidden_dim=8, num_heads=2, num_layers=1)
    params = make_params(cfg, rng)
    snap = random_snapshot(rng, 10, 25)
    h = rng.normal(size=(10, 8))
    edges = S.message_edges(snap)
    expected, alphas = dense_layer(h, snap, params, cfg, 0)
    src, dst = edges
    for c in range(2):
        alpha = S.attention_weights(Tensor(h), edges, params, 0, c).data
        np.testing.assert_allclose(alpha, alphas[c][dst, src], rtol=1e-12, atol=1e-15)
    kept = []
    out = S.aggregate_layer(Tensor(h), edges, params, cfg, 0, kept)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-14)
    assert len(kept) == 2
    np.testing.assert_allclose(kept[1], alphas[1][dst, src], rtol=1e-12)


def test_self_aggregation_single_node():
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=3, num_heads=1, num_layers=1)
    params = make_params(cfg, np.random.default_rng(4))
    params["structural.l0.h0.W_v"] = Tensor(np.eye(3))
    params["structural.l0.h0.b_v"] = Tensor(np.zeros(3))
    snap = snapshot_of([(0, 1)], 2)
    h = np.array([[0.5, -2.0, 1.0], [1.0, 1.0, 1.0]])
    # node 0 alone in its own snapshot view
    edges = (np.array([0]), np.array([0]))
    out = S.aggregate_layer(Tensor(h[:1]), edges, params, cfg, 0)
    np.testing.assert_array_equal(out.data, leaky(h[:1]))
    assert snap.num_edges == 1


def test_symmetric_pair_gets_identical_outputs():
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=4, num_heads=2, num_layers=2)
    params = make_params(cfg, np.random.default_rng(5))
    snap = snapshot_of([(0, 1), (1, 0)], 2)
    x = np.tile([[0.3, -1.0, 2.0]], (2, 1))
    out = S.forward_snapshot(Tensor(x), snap, params, cfg).s.data
    np.testing.assert_array_equal(out[0], out[1])


def test_one_layer_is_composition():
    rng = np.random.default_rng(6)
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=4, num_heads=2, num_layers=1)
    params = make_params(cfg, rng)
    snap = random_snapshot(rng, 8, 15)
    x = Tensor(rng.normal(size=(8, 3)))
    h = S.encode_input(x, params, cfg)
    expected = S.aggregate_layer(h, S.message_edges(snap), params, cfg, 0).data
    np.testing.assert_array_equal(S.forward(x, S.message_edges(snap), params, cfg).s.data, expected)


def _hops(snap, n, start):
    nbrs = dense_neighbors(snap.edges, n)
    dist = {start: 0}
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for w in nbrs[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        frontier = nxt
    return dist


def test_receptive_field_locality():
    rng = np.random.default_rng(7)
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=4, num_heads=2, num_layers=2)
    params = make_params(cfg, rng)
    # a path 0-1-2-3-4-5 plus a spur
    snap = snapshot_of([(0, 1), (2, 1), (2, 3), (4, 3), (4, 5), (5, 6)], 7)
    x = rng.normal(size=(7, 3))
    base = S.forward_snapshot(Tensor(x), snap, params, cfg).s.data
    dist = _hops(snap, 7, 0)
    for far in [v for v, d in dist.items() if d > cfg.num_layers]:
        x2 = x.copy()
        x2[far] += rng.normal(size=3)
        out = S.forward_snapshot(Tensor(x2), snap, params, cfg).s.data
        assert out[0].tobytes() == base[0].tobytes()
    x2 = x.copy()
    x2[2] += 1.0
    near = S.forward_snapshot(Tensor(x2), snap, params, cfg).s.data
    assert not np.array_equal(near[0], base[0])


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=8, num_heads=2, num_layers=2)
    params = make_params(cfg, rng)
    n = 12
    recs = random_records(rng, n, 30)
    perm = rng.permutation(n)
    x = rng.normal(size=(n, 3))
    snap = build_snapshots(recs, SnapshotConfig(interval=1e6), num_nodes=n).snapshots[0]
    recs_p = recs.copy()
    recs_p[:, 0], recs_p[:, 1] = perm[recs[:, 0]], perm[recs[:, 1]]
    snap_p = build_snapshots(recs_p, SnapshotConfig(interval=1e6), num_nodes=n).snapshots[0]
    x_p = np.empty_like(x)
    x_p[perm] = x
    out = S.forward_snapshot(Tensor(x), snap, params, cfg).s.data
    out_p = S.forward_snapshot(Tensor(x_p), snap_p, params, cfg).s.data
    np.testing.assert_allclose(out_p[perm], out, rtol=0, atol=1e-12)


def test_block_stacking_equals_per_snapshot():
    rng = np.random.default_rng(9)
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=4, num_heads=2, num_layers=2)
    params = make_params(cfg, rng)
    n = 6
    snaps = [random_snapshot(rng, n, m) for m in (4, 9)]
    x = rng.normal(size=(n, 3))
    parts = [S.message_edges(s, offset=k * n) for k, s in enumerate(snaps)]
    edges = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    stacked = S.forward(Tensor(np.vstack([x, x])), edges, params, cfg).s.data
    for k, snap in enumerate(snaps):
        single = S.forward(Tensor(x), S.message_edges(snap), params, cfg).s.data
        np.testing.assert_array_equal(stacked[k * n : (k + 1) * n], single)


def test_inactive_rows_are_zero():
    cfg = S.StructuralConfig(input_dim=2, hidden_dim=4, num_heads=2, num_layers=1)
    params = make_params(cfg, np.random.default_rng(10))
    snap = snapshot_of([(0, 1)], 3)
    out = S.forward_snapshot(Tensor(np.ones((3, 2))), snap, params, cfg).s.data
    assert (out[2] == 0).all() and (out[0] != 0).any()


def test_residual_and_layer_norm_options():
    rng = np.random.default_rng(11)
    cfg = S.StructuralConfig(input_dim=4, hidden_dim=4, num_heads=2, num_layers=1, residual=True, layer_norm=True)
    params = make_params(cfg, rng)
    snap = random_snapshot(rng, 5, 8)
    h = rng.normal(size=(5, 4))
    base, _ = dense_layer(h, snap, params, cfg, 0)
    pre = base + h
    mu = pre.mean(axis=1, keepdims=True)
    var = ((pre - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (pre - mu) / np.sqrt(var + 1e-5)
    out = S.aggregate_layer(Tensor(h), S.message_edges(snap), params, cfg, 0).data
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_gradient_check_two_layers_two_heads():
    rng = np.random.default_rng(12)
    cfg = S.StructuralConfig(input_dim=3, hidden_dim=4, num_heads=2, num_layers=2)
    params = make_params(cfg, rng)
    snap = random_snapshot(rng, 10, 20)
    x = Tensor(rng.normal(size=(10, 3)))
    w = rng.normal(size=(10, 4))
    rep = ad.finite_difference_check(lambda: ad.sum(S.forward_snapshot(x, snap, params, cfg).s * w), params)
    assert rep.passed, rep


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        S.StructuralConfig(input_dim=2, hidden_dim=6, num_heads=4)
    with pytest.raises(ValueError):
        S.StructuralConfig(input_dim=2, num_layers=0)
