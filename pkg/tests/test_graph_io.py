import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slotgcn.graph_io import (
    Graph,
    load_graph,
    normalize_gcn,
    random_graph,
    sample_neighbors,
    synthetic_powerlaw,
)


def write(tmp_path, text):
    p = tmp_path / "g.el"
    p.write_text(text)
    return str(p)


def test_load_simple_edge_list(tmp_path):
    g = load_graph(write(tmp_path, "0 1\n1 2\n"))
    assert g.num_nodes == 3
    assert g.edges == ((0, 1), (1, 2))


def test_load_deduplicates_reversed_edges(tmp_path):
    g = load_graph(write(tmp_path, "0 1\n1 0\n"))
    assert g.edges == ((0, 1),)


def test_load_header_bound_check(tmp_path):
    with pytest.raises(ValueError, match="out of range"):
        load_graph(write(tmp_path, "N 3\n0 5\n"))


def test_load_comments_header_and_self_loops(tmp_path):
    g = load_graph(write(tmp_path, "# a comment\nN 5\n0 1 # trailing\n2 2\n"))
    assert g.num_nodes == 5
    assert g.edges == ((0, 1),)


def test_load_parse_error_reports_line(tmp_path):
    with pytest.raises(ValueError, match=":2:"):
        load_graph(write(tmp_path, "0 1\n0 one\n"))


def test_normalize_gcn_single_edge():
    adj = normalize_gcn(Graph(2, ((0, 1),)))
    dense = adj.dense()
    assert dense[0, 1] == pytest.approx(0.5)
    assert dense[0, 0] == pytest.approx(0.5)
    assert dense[1, 0] == pytest.approx(0.5)


def test_normalize_gcn_isolated_node():
    adj = normalize_gcn(Graph(3, ((0, 1),)))
    assert adj.dense()[2, 2] == pytest.approx(1.0)


def test_normalize_gcn_matches_dense_oracle_on_path():
    # 3-path 0-1-2: oracle is D^{-1/2} (A + I) D^{-1/2} built directly.
    g = Graph(3, ((0, 1), (1, 2)))
    a_hat = np.eye(3)
    a_hat[0, 1] = a_hat[1, 0] = a_hat[1, 2] = a_hat[2, 1] = 1.0
    d = np.diag(1.0 / np.sqrt(a_hat.sum(axis=1)))
    oracle = d @ a_hat @ d
    np.testing.assert_allclose(normalize_gcn(g).dense(), oracle, atol=1e-15)
    np.testing.assert_allclose(normalize_gcn(g).dense().sum(axis=1),
                               oracle.sum(axis=1), atol=1e-15)


def test_sample_star_graph_degree_forced():
    g = Graph(4, ((0, 1), (0, 2), (0, 3)))
    adj = sample_neighbors(g, n=2, seed=7)
    center = set(adj.neighbors[0].tolist())
    assert len(center) == 2 and center <= {1, 2, 3}
    for leaf in (1, 2, 3):
        assert adj.neighbors[leaf, 0] == 0
        assert adj.neighbors[leaf, 1] == leaf  # self padding
        assert adj.weights[leaf, 1] == 0.0


def test_sampling_deterministic():
    g = random_graph(40, 4.0, seed=3)
    a = sample_neighbors(g, 3, seed=11)
    b = sample_neighbors(g, 3, seed=11)
    np.testing.assert_array_equal(a.neighbors, b.neighbors)
    np.testing.assert_array_equal(a.weights, b.weights)


@given(st.integers(0, 1000), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_sampled_rows_are_valid(seed, n):
    g = random_graph(25, 3.0, seed=5)
    nbrs = g.neighbor_lists()
    adj = sample_neighbors(g, n, seed)
    for v in range(g.num_nodes):
        allowed = set(nbrs[v]) | {v}
        assert set(adj.neighbors[v].tolist()) <= allowed
        # Rows always sum to the MEAN total of 1.
        assert adj.weights[v].sum() + adj.self_weight[v] == pytest.approx(1.0, abs=1e-12)
        if len(nbrs[v]) >= n:
            np.testing.assert_allclose(adj.weights[v], 1.0 / (n + 1), atol=1e-12)
            assert adj.self_weight[v] == pytest.approx(1.0 / (n + 1), abs=1e-12)


def test_synthetic_powerlaw_shape():
    g = synthetic_powerlaw(200, 4.0, seed=1)
    assert g.num_nodes == 200
    avg = 2 * len(g.edges) / g.num_nodes
    assert 2.5 < avg < 6.0
    deg = g.degrees()
    assert deg.max() > 3 * deg.mean()  # heavy tail


def test_random_graph_edge_budget():
    g = random_graph(100, 4.0, seed=2)
    assert len(g.edges) == 200
