"""Slot-level scheduler and exact-arithmetic SIMD simulator for encrypted GCN inference.

The package plans and simulates the homomorphic-encryption operation stream of
a GraphSage/GCN forward pass: latency-aware column packing, inter-ciphertext
aggregation, sparse intra-ciphertext aggregation via bit-serial rotations
(with aggregation-order and ciphertext-processing-order optimizations), and a
node-order optimizer.  Every schedule is executed on an exact slot-arithmetic
VM and verified against a dense plaintext oracle.
"""

from .graph_io import (
    Graph,
    SampledAdjacency,
    load_graph,
    normalize_gcn,
    random_graph,
    sample_neighbors,
    synthetic_powerlaw,
)
from .slotvm import CipherVec, CostModel, HocReport, LevelExhausted
from .packing import SlotLayout, objective_j, pack, plan_packing, unpack

__all__ = [
    "Graph",
    "SampledAdjacency",
    "load_graph",
    "normalize_gcn",
    "random_graph",
    "sample_neighbors",
    "synthetic_powerlaw",
    "CipherVec",
    "CostModel",
    "HocReport",
    "LevelExhausted",
    "SlotLayout",
    "objective_j",
    "pack",
    "plan_packing",
    "unpack",
]
