"""Graph loading, neighbor sampling, and aggregation-weight construction.

Everything here is pure plaintext preprocessing: parsing edge lists,
GraphSage-style uniform neighbor sampling, and building the normalized
aggregation coefficients that the encrypted pipeline later applies as
plaintext masks.  All functions are pure and deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MEAN = "mean"
GCN = "gcn"


@dataclass(frozen=True)
class Graph:
    """Undirected graph with dense 0-based node ids and canonical edge list."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]

    def neighbor_lists(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        for lst in nbrs:
            lst.sort()
        return nbrs

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg


@dataclass
class SampledAdjacency:
    """Per-node neighbor lists of fixed width with aggregation weights.

    Each node has exactly ``n`` neighbor entries; nodes with fewer distinct
    neighbors are padded with themselves at weight zero.  The self
    contribution is kept separately in ``self_weight`` so the row semantics
    are uniform across mean aggregation and symmetric normalization.
    """

    n: int
    neighbors: np.ndarray  # (N, n) int64
    weights: np.ndarray  # (N, n) float64, 0.0 on padding
    self_weight: np.ndarray  # (N,) float64
    mode: str = MEAN
    num_nodes: int = field(init=False)

    def __post_init__(self):
        self.num_nodes = int(self.neighbors.shape[0])
        assert self.neighbors.shape == (self.num_nodes, self.n)
        assert self.weights.shape == (self.num_nodes, self.n)

    def real_degree(self, v: int) -> int:
        """Number of neighbor entries carrying nonzero weight."""
        return int(np.count_nonzero(self.weights[v]))

    def dense(self) -> np.ndarray:
        """Dense aggregation matrix M with (M @ X) = aggregated features."""
        m = np.zeros((self.num_nodes, self.num_nodes))
        for v in range(self.num_nodes):
            for k in range(self.n):
                m[v, self.neighbors[v, k]] += self.weights[v, k]
            m[v, v] += self.self_weight[v]
        return m


def load_graph(path: str) -> Graph:
    """Parse a whitespace-separated edge list.

    Lines starting with ``#`` are comments.  An optional first data line
    ``N <count>`` declares the node count; otherwise N = 1 + max id.
    Edges are canonicalized: sorted pairs, deduplicated, self-loops dropped.
    """
    declared_n = None
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if declared_n is None and not pairs and parts[0] in ("N", "n"):
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: malformed header {line!r}")
                declared_n = int(parts[1])
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two node ids, got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer node id in {line!r}") from exc
            if u < 0 or v < 0:
                raise ValueError(f"{path}:{lineno}: negative node id in {line!r}")
            if declared_n is not None and (u >= declared_n or v >= declared_n):
                raise ValueError(
                    f"{path}:{lineno}: node id {max(u, v)} out of range for N={declared_n}"
                )
            pairs.append((u, v))
    if declared_n is None:
        declared_n = 1 + max((max(p) for p in pairs), default=-1)
    edges = sorted({(min(u, v), max(u, v)) for u, v in pairs if u != v})
    return Graph(num_nodes=declared_n, edges=tuple(edges))


def sample_neighbors(g: Graph, n: int, seed: int) -> SampledAdjacency:
    """Uniformly sample up to ``n`` distinct neighbors per node, without replacement.

    Nodes with degree < n are padded with themselves at weight zero, and the
    mean is taken over the distinct participants only: a node with d sampled
    neighbors gives each of them, and itself, weight 1/(d+1).
    """
    if n < 1:
        raise ValueError(f"neighbor count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    nbr_lists = g.neighbor_lists()
    neighbors = np.empty((g.num_nodes, n), dtype=np.int64)
    weights = np.zeros((g.num_nodes, n))
    self_weight = np.empty(g.num_nodes)
    for v in range(g.num_nodes):
        pool = nbr_lists[v]
        if len(pool) > n:
            chosen = sorted(rng.choice(pool, size=n, replace=False).tolist())
        else:
            chosen = list(pool)
        d = len(chosen)
        neighbors[v, :d] = chosen
        neighbors[v, d:] = v  # self padding
        weights[v, :d] = 1.0 / (d + 1)
        self_weight[v] = 1.0 / (d + 1)
    return SampledAdjacency(n=n, neighbors=neighbors, weights=weights,
                            self_weight=self_weight, mode=MEAN)


def normalize_gcn(g: Graph) -> SampledAdjacency:
    """Full symmetric-normalized adjacency D^{-1/2} (A + I) D^{-1/2}.

    Rows are padded to the maximum degree with zero-weight self entries; the
    diagonal term lands in ``self_weight``.  Isolated nodes get weight 1 on
    themselves.
    """
    nbr_lists = g.neighbor_lists()
    deg_plus = np.array([len(l) + 1 for l in nbr_lists], dtype=np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg_plus)
    n = max((len(l) for l in nbr_lists), default=0)
    n = max(n, 1)
    neighbors = np.empty((g.num_nodes, n), dtype=np.int64)
    weights = np.zeros((g.num_nodes, n))
    self_weight = np.empty(g.num_nodes)
    for v in range(g.num_nodes):
        lst = nbr_lists[v]
        d = len(lst)
        neighbors[v, :d] = lst
        neighbors[v, d:] = v
        for k, u in enumerate(lst):
            weights[v, k] = inv_sqrt[v] * inv_sqrt[u]
        self_weight[v] = inv_sqrt[v] * inv_sqrt[v]
    return SampledAdjacency(n=n, neighbors=neighbors, weights=weights,
                            self_weight=self_weight, mode=GCN)


def random_graph(num_nodes: int, avg_degree: float, seed: int) -> Graph:
    """Erdos-Renyi style graph with a fixed number of distinct edges."""
    rng = np.random.default_rng(seed)
    target = int(round(num_nodes * avg_degree / 2))
    edges: set[tuple[int, int]] = set()
    # Rejection sampling; the edge budget stays far below the dense limit.
    limit = num_nodes * (num_nodes - 1) // 2
    target = min(target, limit)
    while len(edges) < target:
        draw = rng.integers(0, num_nodes, size=(2 * (target - len(edges)) + 8, 2))
        for u, v in draw:
            if u != v:
                edges.add((min(int(u), int(v)), max(int(u), int(v))))
            if len(edges) == target:
                break
    return Graph(num_nodes=num_nodes, edges=tuple(sorted(edges)))


def synthetic_powerlaw(num_nodes: int, avg_degree: float, seed: int) -> Graph:
    """Preferential-attachment graph with average degree ~= avg_degree.

    Simple Barabasi-Albert process: each new node attaches to
    m = round(avg_degree / 2) existing nodes chosen proportionally to their
    current degree (without replacement per new node).
    """
    rng = np.random.default_rng(seed)
    m = max(1, int(round(avg_degree / 2)))
    if num_nodes <= m:
        raise ValueError("need more nodes than attachments per step")
    # Seed clique on the first m+1 nodes, then preferential attachment via a
    # repeated-endpoint list (degree-proportional sampling).
    edges = {(j, i) for i in range(m + 1) for j in range(i)}
    stubs = [x for e in edges for x in e]
    for v in range(m + 1, num_nodes):
        chosen: set[int] = set()
        while len(chosen) < m:
            chosen.add(int(stubs[rng.integers(0, len(stubs))]))
        for u in sorted(chosen):
            edges.add((min(u, v), max(u, v)))
            stubs.extend((u, v))
    return Graph(num_nodes=num_nodes, edges=tuple(sorted(edges)))


def load_matrix(path: str) -> np.ndarray:
    """Numeric CSV matrix, one row per line."""
    mat = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{path}: matrix contains non-finite values")
    return mat


def random_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded matrix with entries uniform in [-1, 1)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(rows, cols))
