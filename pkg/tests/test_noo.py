import itertools

import numpy as np
import pytest

from slotgcn.graph_io import Graph, normalize_gcn, random_graph, sample_neighbors, synthetic_powerlaw
from slotgcn.noo import (
    RegionPartition,
    _ConflictSim,
    detect_regions,
    greedy_place,
    identity_order,
    interleave,
    optimize_order,
    order_backprop,
    random_order,
    write_order,
)
from slotgcn.packing import SlotLayout, pack, unpack
from slotgcn.slotvm import HocReport
from slotgcn.spintra import SpintraOpts, aggregate_spintra, plan_spintra


def full_adj(g):
    return normalize_gcn(g)


def test_two_triangles_two_regions():
    g = Graph(6, ((0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)))
    part = detect_regions(full_adj(g), th=10)
    assert len(part.regions) == 2
    assert sorted(map(len, part.regions)) == [3, 3]
    assert {frozenset(r) for r in part.regions} == {frozenset({0, 1, 2}),
                                                    frozenset({3, 4, 5})}


def test_star_leaves_are_mutual_siblings():
    g = Graph(5, ((0, 1), (0, 2), (0, 3), (0, 4)))
    part = detect_regions(full_adj(g), th=10)
    assert len(part.regions) == 1
    assert sorted(part.regions[0]) == [0, 1, 2, 3, 4]


def test_clique_capped_regions():
    edges = tuple((i, j) for i in range(6) for j in range(i))
    part = detect_regions(full_adj(Graph(6, edges)), th=2)
    assert [len(r) for r in part.regions] == [2, 2, 2]


def test_interleave_equal_regions():
    part = RegionPartition(regions=[[0, 1, 2, 3], [4, 5, 6, 7]], th=8)
    order = interleave(part, ring=8)
    np.testing.assert_array_equal(order.lanes[0], [0, 2, 4, 6])
    np.testing.assert_array_equal(order.lanes[1], [1, 3, 5, 7])


def test_interleave_exhaustion_blanks():
    # Regions of 3 and 1 in a ring of 8: pattern A B A _ A _ _ _ ; the
    # exhausted region's turns take the blanks first.
    part = RegionPartition(regions=[[0, 1, 2], [3]], th=8)
    order = interleave(part, ring=8)
    np.testing.assert_array_equal(order.lanes[0], [0, 2, 4, 6])
    np.testing.assert_array_equal(order.lanes[1], [1, 3, 5, 7])


def test_interleave_single_region_contiguous():
    part = RegionPartition(regions=[[2, 0, 1]], th=4)
    order = interleave(part, ring=4)
    np.testing.assert_array_equal(order.lanes[0], [0, 1, 2, 3])


def test_interleave_overflow_is_error():
    part = RegionPartition(regions=[[0, 1, 2]], th=4)
    with pytest.raises(ValueError, match="exceed"):
        interleave(part, ring=2)


def test_interleave_stride_property():
    sizes = [5, 5, 5]
    nodes = iter(range(15))
    part = RegionPartition(regions=[[next(nodes) for _ in range(s)] for s in sizes],
                           th=8)
    order = interleave(part, ring=16)
    stride = len(sizes)
    for r, lane in enumerate(order.lanes):
        full = lane[:5]  # while every region is active
        assert all(p % stride == r for p in full)


def test_single_node_region_zero_conflicts():
    part = RegionPartition(regions=[[0]], th=4)
    g = Graph(1, ())
    adj = full_adj(g)
    order = greedy_place(part, adj, interleave(part, ring=4))
    assert order.position[0] == 0


def placement_conflicts(adj, order_in_region, lane_idx, ring2):
    """Oracle: total conflicts accumulated in placement order (test-side).

    ``lane_idx`` maps node -> lane index; the simulation runs in lane
    coordinates exactly like the placer.
    """
    sim = _ConflictSim(ring2)
    total = 0.0
    placed: set = set()
    directed = [(int(adj.neighbors[v, k]), v)
                for v in range(adj.num_nodes) for k in range(adj.n)
                if adj.weights[v, k] != 0.0 and adj.neighbors[v, k] != v]
    for node in order_in_region:
        placed.add(node)
        for s, d in directed:
            if (s == node or d == node) and s in placed and d in placed:
                total += float(sim.score(np.array([lane_idx[s]]),
                                         np.array([lane_idx[d]]))[0])
                sim.add_token(lane_idx[s], lane_idx[d])
    return total


def test_greedy_matches_enumeration_on_ring_region(make_adj):
    # Directed 4-ring (each node aggregates its successor): all shifts can be
    # made equal, so a zero-conflict arrangement exists; greedy must find the
    # enumerated optimum.
    adj = make_adj(4, {v: [(v + 1) % 4] for v in range(4)})
    part = detect_regions(adj, th=8)
    assert len(part.regions) == 1
    region = part.regions[0]
    skeleton = interleave(part, ring=4)
    placed = greedy_place(part, adj, skeleton)
    lane = skeleton.lanes[0].tolist()
    best = None
    for perm in itertools.permutations(range(1, 4)):
        lane_idx = {region[0]: 0}
        lane_idx.update({node: idx for node, idx in zip(region[1:], perm)})
        score = placement_conflicts(adj, region, lane_idx, 4)
        best = score if best is None else min(best, score)
    got_idx = {node: lane.index(int(placed.position[node])) for node in region}
    assert placement_conflicts(adj, region, got_idx, 4) == best == 0


def test_noo_reduces_rotations_on_powerlaw_graph():
    g = synthetic_powerlaw(192, 4.0, seed=3)
    adj = sample_neighbors(g, n=4, seed=3)
    ring = 512
    layout_id = SlotLayout(slots=ring, t=1, num_nodes=192, feat_dim=1,
                           node_pos=identity_order(192, ring).position)
    noo = optimize_order(adj, ring, th=192)
    layout_noo = SlotLayout(slots=ring, t=1, num_nodes=192, feat_dim=1,
                            node_pos=order_backprop(noo))
    base = plan_spintra(adj, layout_id, SpintraOpts())
    tuned = plan_spintra(adj, layout_noo, SpintraOpts())
    assert tuned.rot_count() < base.rot_count()


def test_noo_order_still_oracle_exact():
    g = random_graph(24, 3.0, seed=4)
    adj = sample_neighbors(g, n=2, seed=4)
    noo = optimize_order(adj, ring=32, th=16)
    layout = SlotLayout(slots=32, t=1, num_nodes=24, feat_dim=3,
                        node_pos=noo.position)
    x = np.random.default_rng(4).uniform(-1, 1, (24, 3))
    hoc = HocReport()
    agg = aggregate_spintra(adj, pack(x, layout, level=3), layout, hoc)
    np.testing.assert_allclose(unpack(agg, layout), adj.dense() @ x, atol=1e-9)


def test_greedy_conflicts_not_worse_than_id_order_statistically():
    # The greedy minimizes the simulated conflict objective; compare against
    # placing nodes on the same skeleton in plain id order, over many seeds.
    wins = ties = losses = 0
    for seed in range(20):
        g = random_graph(48, 4.0, seed=seed)
        adj = sample_neighbors(g, n=3, seed=seed)
        part = detect_regions(adj, th=48)
        skeleton = interleave(part, ring=64)
        greedy = greedy_place(part, adj, skeleton)
        total_g = total_n = 0.0
        for region, lane in zip(part.regions, skeleton.lanes):
            lane_list = lane.tolist()
            ring2 = 1 << max(len(lane) - 1, 1).bit_length()
            greedy_idx = {node: lane_list.index(int(greedy.position[node]))
                          for node in region}
            naive_idx = {node: j for j, node in enumerate(sorted(region))}
            total_g += placement_conflicts(adj, region, greedy_idx, ring2)
            total_n += placement_conflicts(adj, sorted(region), naive_idx, ring2)
        wins += total_g < total_n
        ties += total_g == total_n
        losses += total_g > total_n
    assert wins + ties >= 17  # statistical, not per-instance
    assert wins > losses


def test_order_determinism_and_file_format(tmp_path):
    g = random_graph(20, 3.0, seed=5)
    adj = sample_neighbors(g, n=2, seed=5)
    a = optimize_order(adj, ring=32, th=8)
    b = optimize_order(adj, ring=32, th=8)
    np.testing.assert_array_equal(a.position, b.position)
    path = tmp_path / "order.txt"
    write_order(a, str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 32
    ids = [int(l) for l in lines if l != "_"]
    assert sorted(ids) == list(range(20))


def test_random_order_is_seeded():
    a = random_order(10, 16, seed=3)
    b = random_order(10, 16, seed=3)
    np.testing.assert_array_equal(a.position, b.position)
    assert len(set(a.position.tolist())) == 10
