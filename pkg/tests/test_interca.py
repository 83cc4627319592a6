import math

import numpy as np
import pytest

from slotgcn.graph_io import Graph, random_graph, sample_neighbors
from slotgcn.interca import aggregate_layer1, build_interca, exec_interca, layer1_self, layer1_stream
from slotgcn.packing import SlotLayout, unpack
from slotgcn.slotvm import ADD, PMULT, ROT, HocReport


def run_agg(adj, x, layout, level=3):
    hoc = HocReport()
    acc = aggregate_layer1(adj, x, layout, level, hoc)
    return unpack(acc, layout), hoc


def test_chain_single_neighbor():
    g = Graph(3, ((0, 1), (1, 2)))
    adj = sample_neighbors(g, n=1, seed=0)
    plan = build_interca(adj, SlotLayout(slots=4, t=1, num_nodes=3, feat_dim=1))
    # One permuted layout: each node's slot maps to its single sampled neighbor.
    assert plan.perms.shape == (1, 3)
    x = np.array([[1.0], [2.0], [3.0]])
    out, _ = run_agg(adj, x, plan.layout)
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-12)


def test_two_node_identity_features_matches_oracle():
    g = Graph(2, ((0, 1),))
    adj = sample_neighbors(g, n=1, seed=1)
    x = np.eye(2)
    layout = SlotLayout(slots=4, t=1, num_nodes=2, feat_dim=2)
    out, hoc = run_agg(adj, x, layout)
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-12)
    assert hoc.count(ROT) == 0  # t = 1 never rotates


def test_predicted_counts_cora_shape():
    g = random_graph(64, 4.0, seed=2)
    adj = sample_neighbors(g, n=4, seed=2)
    layout = SlotLayout(slots=256, t=2, num_nodes=64, feat_dim=1433)
    plan = build_interca(adj, layout)
    assert plan.predicted["pmult"] == 2866
    assert plan.predicted["add"] == 2866
    assert plan.predicted["rot"] == 1


def test_exact_counts_aligned_width():
    # t | F: recorded PMult = Add = F*n/t exactly, zero rotations.
    g = random_graph(24, 3.0, seed=3)
    adj = sample_neighbors(g, n=3, seed=3)
    layout = SlotLayout(slots=128, t=4, num_nodes=24, feat_dim=8)
    x = np.random.default_rng(0).uniform(-1, 1, (24, 8))
    out, hoc = run_agg(adj, x, layout)
    formula = math.ceil(8 * 3 / 4)
    assert hoc.count(PMULT) == formula
    assert hoc.count(ADD) == formula
    assert hoc.count(ROT) == 0
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-9)


def test_exact_counts_shared_tail():
    # F mod t == 1: shared tails keep PMult at the formula and realize the
    # ceil(log2 t) rotation group; the fold costs that many extra additions.
    g = random_graph(16, 3.0, seed=4)
    adj = sample_neighbors(g, n=4, seed=4)
    layout = SlotLayout(slots=64, t=2, num_nodes=16, feat_dim=5)
    x = np.random.default_rng(1).uniform(-1, 1, (16, 5))
    out, hoc = run_agg(adj, x, layout)
    formula = math.ceil(5 * 4 / 2)  # 10
    assert hoc.count(PMULT) == formula
    assert hoc.count(ROT) == 1
    assert hoc.count(ADD) == formula + 1
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-9)


def test_wide_tail_falls_back_to_per_stream():
    g = random_graph(8, 2.0, seed=5)
    adj = sample_neighbors(g, n=2, seed=5)
    layout = SlotLayout(slots=64, t=4, num_nodes=8, feat_dim=7)  # r = 3
    x = np.random.default_rng(2).uniform(-1, 1, (8, 7))
    out, hoc = run_agg(adj, x, layout)
    assert hoc.count(PMULT) == 2 * 2  # n * ceil(F/t)
    assert hoc.count(ROT) == 0
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-9)


def test_uniform_weights_give_mean_minus_self():
    g = random_graph(10, 4.0, seed=6)
    adj = sample_neighbors(g, n=3, seed=6)
    full = np.array([adj.real_degree(v) == 3 for v in range(10)])
    x = np.random.default_rng(3).uniform(-1, 1, (10, 2))
    layout = SlotLayout(slots=16, t=1, num_nodes=10, feat_dim=2)
    out, _ = run_agg(adj, x, layout)
    oracle = adj.dense() @ x
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    # For full-degree nodes the row is the plain mean over self + 3 neighbors.
    for v in np.nonzero(full)[0]:
        participants = np.vstack([x[v], x[adj.neighbors[v]]])
        np.testing.assert_allclose(out[v], participants.mean(axis=0), atol=1e-12)


def test_random_graph_matches_dense_oracle():
    g = random_graph(16, 3.0, seed=7)
    adj = sample_neighbors(g, n=2, seed=7)
    x = np.random.default_rng(4).uniform(-1, 1, (16, 6))
    layout = SlotLayout(slots=32, t=2, num_nodes=16, feat_dim=6)
    out, _ = run_agg(adj, x, layout)
    assert np.max(np.abs(out - adj.dense() @ x)) < 1e-9


def test_block_spanning_aggregation():
    # N > S with t = 1: per-block streams, still oracle-exact.
    g = random_graph(20, 3.0, seed=8)
    adj = sample_neighbors(g, n=2, seed=8)
    x = np.random.default_rng(5).uniform(-1, 1, (20, 3))
    layout = SlotLayout(slots=8, t=1, num_nodes=20, feat_dim=3)
    assert layout.blocks == 3
    out, hoc = run_agg(adj, x, layout)
    np.testing.assert_allclose(out, adj.dense() @ x, atol=1e-9)
    assert hoc.count(PMULT) == 3 * math.ceil(3 * 2 / 1)


def test_level_accounting():
    g = Graph(2, ((0, 1),))
    adj = sample_neighbors(g, n=1, seed=9)
    layout = SlotLayout(slots=4, t=1, num_nodes=2, feat_dim=1)
    plan = build_interca(adj, layout)
    hoc = HocReport()
    acc = exec_interca(plan, layer1_stream(plan, np.ones((2, 1)), 4),
                       layer1_self(plan, np.ones((2, 1)), 4), hoc)
    assert all(c.level == 3 for c in acc)  # one weight-multiply level
