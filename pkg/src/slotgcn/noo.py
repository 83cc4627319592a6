"""Node order optimization: region detection, interleave, greedy placement.

Rotation cost in the bit-serial aggregation scheduler tracks two things: how
far values must travel inside the ciphertext ring, and how often they collide
on the way.  The optimizer attacks both.  Nodes that aggregate together
("siblings": co-parents of some common node) are grouped into regions by a
sibling-relation BFS capped at ``TH`` nodes; regions are laid out interleaved
(ABCABC...) so that each region forms an independent sub-ring with a common
stride; inside each region a greedy search places one node at a time at the
free lane slot that minimizes simulated bit-serial conflicts against the
nodes already placed.

The conflict simulation mirrors the scheduler's conflict predicate: a token
moving at bit m collides when it lands on a slot someone occupies entering
that step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:  # jitted placement kernel; pure-numpy fallback below
    import numba
except ImportError:  # pragma: no cover
    numba = None

from .graph_io import SampledAdjacency


@dataclass
class RegionPartition:
    """Disjoint node regions, each at most ``th`` nodes, in detection order."""

    regions: list[list[int]]
    th: int

    def __post_init__(self):
        seen: set = set()
        for r in self.regions:
            if len(r) > self.th:
                raise ValueError("region exceeds the node cap")
            if seen & set(r):
                raise ValueError("regions must be disjoint")
            seen |= set(r)


@dataclass
class NodeOrder:
    """Permutation node id -> ring position, plus the per-region lane map."""

    position: np.ndarray  # node -> position; blanks are unassigned positions
    ring: int
    lanes: list[np.ndarray]  # per region, the positions reserved for it
    regions: list[list[int]]

    def blanks(self) -> np.ndarray:
        used = set(self.position.tolist())
        return np.array([p for p in range(self.ring) if p not in used])


def _undirected_degree(adj: SampledAdjacency) -> np.ndarray:
    deg = [set() for _ in range(adj.num_nodes)]
    for v in range(adj.num_nodes):
        for k in range(adj.n):
            if adj.weights[v, k] == 0.0:
                continue
            u = int(adj.neighbors[v, k])
            deg[v].add(u)
            deg[u].add(v)
    return np.array([len(s) for s in deg])


def _group_membership(adj: SampledAdjacency):
    """For each node, the ids of the sibling groups {v} u nbrs(v) that contain it."""
    members: list[list[int]] = [[] for _ in range(adj.num_nodes)]
    groups: list[list[int]] = []
    for v in range(adj.num_nodes):
        grp = sorted({v} | {int(adj.neighbors[v, k]) for k in range(adj.n)
                            if adj.weights[v, k] != 0.0})
        gid = len(groups)
        groups.append(grp)
        for u in grp:
            members[u].append(gid)
    return groups, members


def detect_regions(adj: SampledAdjacency, th: int) -> RegionPartition:
    """Sibling-relation BFS from the highest-degree unassigned node.

    Two nodes are siblings iff some node has both among its sampled
    neighbors (or is one of them itself); they are exactly the pairs that
    interact during aggregation.  Each region is capped at ``th`` nodes;
    degree ties break toward the smaller node id.
    """
    if th < 1:
        raise ValueError("region cap must be >= 1")
    n_nodes = adj.num_nodes
    degree = _undirected_degree(adj)
    groups, members = _group_membership(adj)
    assigned = np.zeros(n_nodes, dtype=bool)
    seed_order = sorted(range(n_nodes), key=lambda v: (-degree[v], v))
    regions: list[list[int]] = []
    for seed in seed_order:
        if assigned[seed]:
            continue
        region: list[int] = []
        queue = [seed]
        enqueued = {seed}
        while queue and len(region) < th:
            u = queue.pop(0)
            if assigned[u]:
                continue
            assigned[u] = True
            region.append(u)
            for gid in members[u]:
                for w in groups[gid]:
                    if not assigned[w] and w not in enqueued:
                        enqueued.add(w)
                        queue.append(w)
        regions.append(region)
    return RegionPartition(regions=regions, th=th)


def interleave(partition: RegionPartition, ring: int) -> NodeOrder:
    """Reserve ring positions for each region in a round-robin pattern.

    Rules: all regions alternate (ABCABC...); when a region runs out of
    nodes its turns are filled with blank slots while the blank budget
    lasts; once blanks are exhausted the remaining regions keep alternating
    without it.  While every region is still active, region r owns exactly
    the positions congruent to r modulo the region count.
    """
    sizes = [len(r) for r in partition.regions]
    total = sum(sizes)
    if total > ring:
        raise ValueError(f"{total} nodes exceed the ring of {ring} slots")
    blanks = ring - total
    remaining = list(sizes)
    lanes: list[list[int]] = [[] for _ in partition.regions]
    rotation = list(range(len(partition.regions)))
    pos = 0
    while rotation:
        next_rotation = []
        for r in rotation:
            if remaining[r] > 0:
                lanes[r].append(pos)
                remaining[r] -= 1
                pos += 1
                next_rotation.append(r)
            elif blanks > 0:
                lanes[r].append(pos)  # blank slot kept in r's lane
                blanks -= 1
                pos += 1
                next_rotation.append(r)
            # else: region leaves the rotation
        rotation = next_rotation
        if not any(remaining) and blanks == 0:
            break
    position = np.full(_num_nodes(partition), -1, dtype=np.int64)
    return NodeOrder(position=position, ring=ring,
                     lanes=[np.array(l, dtype=np.int64) for l in lanes],
                     regions=partition.regions)


def _num_nodes(partition: RegionPartition) -> int:
    return sum(len(r) for r in partition.regions)


def _region_edges(adj: SampledAdjacency, region: list[int]):
    """Directed in-region aggregation pairs: token source -> target."""
    in_region = set(region)
    out_map: dict[int, list[int]] = {v: [] for v in region}  # v aggregates u
    in_map: dict[int, list[int]] = {v: [] for v in region}  # nodes aggregating u
    for v in region:
        for k in range(adj.n):
            if adj.weights[v, k] == 0.0:
                continue
            u = int(adj.neighbors[v, k])
            if u in in_region and u != v:
                out_map[v].append(u)
                in_map[u].append(v)
    return out_map, in_map


class _ConflictSim:
    """Stay/landing histograms over the bit-serial paths of placed tokens.

    Mirrors the scheduler's conflict predicate: a mover collides when its
    landing slot is held by a token that stays through that bit or by
    another mover landing there; a stayer collides when a mover lands on it.
    Tokens moving in lockstep do not collide.
    """

    def __init__(self, lane_len: int):
        ring2 = 1 << max(lane_len - 1, 1).bit_length()
        self.ring2 = ring2
        self.nbits = max(ring2.bit_length() - 1, 1)
        self.stay = np.zeros((self.nbits, ring2))
        self.land = np.zeros((self.nbits, ring2))

    def add_token(self, src: int, dst: int):
        sigma = (src - dst) % self.ring2
        q = src
        for m in range(self.nbits):
            if (sigma >> m) & 1:
                q = (q - (1 << m)) % self.ring2
                self.land[m, q] += 1
            else:
                self.stay[m, q] += 1

    def score(self, src, dst) -> np.ndarray:
        """Vectorized conflict count for tokens src -> dst (equal-length arrays)."""
        src = np.atleast_1d(np.asarray(src, dtype=np.int64))
        dst = np.atleast_1d(np.asarray(dst, dtype=np.int64))
        sigma = (src - dst) % self.ring2
        k = np.zeros(len(sigma))
        q = src.copy()
        for m in range(self.nbits):
            moving = ((sigma >> m) & 1).astype(bool)
            if moving.any():
                qn = (q - (1 << m)) % self.ring2
                k = k + moving * (self.stay[m, qn] + self.land[m, qn])
                q = np.where(moving, qn, q)
            k = k + (~moving) * self.land[m, q]
        return k

    def score_candidates(self, fixed: np.ndarray, fixed_is_src: np.ndarray,
                         cands: np.ndarray) -> np.ndarray:
        """Summed conflict count over all partner tokens, per candidate slot.

        ``fixed[p]`` is the placed partner's lane index; tokens run
        fixed -> candidate when ``fixed_is_src[p]`` else candidate -> fixed.
        """
        if _score_kernel is not None:
            return _score_kernel(self.stay, self.land, fixed, fixed_is_src,
                                 cands, self.ring2, self.nbits)
        total = np.zeros(len(cands))
        for p in range(len(fixed)):
            f = np.full(len(cands), fixed[p], dtype=np.int64)
            if fixed_is_src[p]:
                total += self.score(f, cands)
            else:
                total += self.score(cands, f)
        return total


if numba is not None:
    @numba.njit(cache=True)
    def _score_kernel(stay, land, fixed, fixed_is_src, cands, ring2, nbits):
        out = np.zeros(len(cands))
        for c in range(len(cands)):
            cand = cands[c]
            acc = 0.0
            for p in range(len(fixed)):
                if fixed_is_src[p]:
                    src, dst = fixed[p], cand
                else:
                    src, dst = cand, fixed[p]
                sigma = (src - dst) % ring2
                q = src
                for m in range(nbits):
                    if (sigma >> m) & 1:
                        q = (q - (1 << m)) % ring2
                        acc += stay[m, q] + land[m, q]
                    else:
                        acc += land[m, q]
            out[c] = acc
        return out
else:  # pragma: no cover
    _score_kernel = None


def greedy_place(partition: RegionPartition, adj: SampledAdjacency,
                 skeleton: NodeOrder, scan_chunk: int = 512) -> NodeOrder:
    """Conflict-minimizing placement of each region's nodes on its lane.

    Regions are independent sub-problems.  Within a region, nodes are taken
    in detection order (the seed, of highest degree, goes to the first lane
    slot); every subsequent node is scored at each free lane index against
    the already-placed tokens and lands at the minimum, ties toward the
    smallest index.  Scanning proceeds in ascending chunks and stops early
    only when a zero-conflict slot is found, which preserves the tie rule.
    """
    position = skeleton.position.copy()
    for region, lane in zip(partition.regions, skeleton.lanes):
        lane_len = len(lane)
        sim = _ConflictSim(lane_len)
        out_map, in_map = _region_edges(adj, region)
        placed_at: dict[int, int] = {}  # node -> lane index
        free = np.ones(lane_len, dtype=bool)

        def activate(node, idx):
            placed_at[node] = idx
            free[idx] = False
            position[node] = lane[idx]
            for u in out_map[node]:
                if u in placed_at:
                    sim.add_token(placed_at[u], idx)
            for v in in_map[node]:
                if v in placed_at:
                    sim.add_token(idx, placed_at[v])

        for j, node in enumerate(region):
            if j == 0:
                activate(node, 0)
                continue
            fixed = ([placed_at[u] for u in out_map[node] if u in placed_at]
                     + [placed_at[v] for v in in_map[node] if v in placed_at])
            n_src = len([u for u in out_map[node] if u in placed_at])
            is_src = np.array([True] * n_src + [False] * (len(fixed) - n_src))
            fixed = np.array(fixed, dtype=np.int64)
            cands_all = np.nonzero(free)[0]
            if not len(fixed):
                activate(node, int(cands_all[0]))
                continue
            best_idx, best_score = None, None
            for start in range(0, len(cands_all), scan_chunk):
                chunk = cands_all[start:start + scan_chunk]
                scores = sim.score_candidates(fixed, is_src, chunk)
                i = int(np.argmin(scores))
                if best_score is None or scores[i] < best_score:
                    best_score, best_idx = float(scores[i]), int(chunk[i])
                if best_score == 0.0:
                    break
            activate(node, best_idx)
    return NodeOrder(position=position, ring=skeleton.ring,
                     lanes=skeleton.lanes, regions=partition.regions)


def optimize_order(adj: SampledAdjacency, ring: int, th: int) -> NodeOrder:
    """Full pipeline: detect regions, interleave, greedy placement."""
    partition = detect_regions(adj, th)
    skeleton = interleave(partition, ring)
    return greedy_place(partition, adj, skeleton)


def identity_order(num_nodes: int, ring: int) -> NodeOrder:
    pos = np.arange(num_nodes, dtype=np.int64)
    return NodeOrder(position=pos, ring=ring, lanes=[pos],
                     regions=[list(range(num_nodes))])


def random_order(num_nodes: int, ring: int, seed: int) -> NodeOrder:
    rng = np.random.default_rng(seed)
    pos = rng.permutation(ring)[:num_nodes].astype(np.int64)
    return NodeOrder(position=pos, ring=ring, lanes=[np.sort(pos)],
                     regions=[list(range(num_nodes))])


def order_backprop(order: NodeOrder) -> np.ndarray:
    """Packing directive: the position permutation the client packs with.

    The optimized order is propagated back to the initial packing, so the
    first layer starts in optimized order at zero homomorphic cost.
    """
    return order.position


def write_order(order: NodeOrder, path: str):
    """One node id per line, position-ordered, ``_`` for blank slots."""
    by_pos = {int(p): v for v, p in enumerate(order.position)}
    with open(path, "w") as fh:
        for p in range(order.ring):
            fh.write(f"{by_pos.get(p, '_')}\n")
