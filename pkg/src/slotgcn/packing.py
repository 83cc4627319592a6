"""Column-width planning and (ciphertext, slot) layout for feature matrices.

A feature matrix is packed column-major: ``t`` feature columns share one
ciphertext, each occupying a contiguous lane of ``S / t`` slots, with node
``v`` of column ``f`` at slot ``(f mod t) * (S/t) + pos(v)``.  When a single
column does not fit (t = 1 and N > S) the column spans consecutive block
ciphertexts; that case is reported, never an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .slotvm import CipherVec

DEFAULT_ROT_WEIGHT = 20.0


def _ceil_log2(t: int) -> int:
    return int(math.ceil(math.log2(t))) if t > 1 else 0


def objective_j(t: int, feat_dim: int, n: int,
                rot_weight: float = DEFAULT_ROT_WEIGHT) -> float:
    """First-layer latency estimate for packing width t.

    Two PMult-unit ops per packed aggregation ciphertext plus the
    rotation-weighted lane-consolidation term:
    ``2 * ceil(F*n / t) + rot_weight * ceil(log2 t)``.
    """
    if t < 1:
        raise ValueError(f"packing width must be >= 1, got {t}")
    return 2.0 * math.ceil(feat_dim * n / t) + rot_weight * _ceil_log2(t)


@dataclass(frozen=True)
class SlotLayout:
    """Assignment of matrix entries to (ciphertext, slot) positions."""

    slots: int  # S, power of two
    t: int  # columns per ciphertext, power of two
    num_nodes: int
    feat_dim: int
    node_pos: np.ndarray = None  # node id -> ring position; identity if None

    def __post_init__(self):
        if self.slots & (self.slots - 1):
            raise ValueError("slot count must be a power of two")
        if self.t < 1 or self.t & (self.t - 1):
            raise ValueError("packing width must be a power of two")
        if self.t > max(self.feat_dim, 1):
            raise ValueError(f"t={self.t} exceeds feature dim {self.feat_dim}")
        if self.node_pos is None:
            object.__setattr__(self, "node_pos", np.arange(self.num_nodes))
        if len(self.node_pos) != self.num_nodes:
            raise ValueError("node order length mismatch")
        if self.t > 1 and self.num_nodes * self.t > self.slots:
            raise ValueError("t > 1 requires all nodes to fit one lane")

    @property
    def n_pad(self) -> int:
        """Ring length of one column lane."""
        return self.slots // self.t

    @property
    def blocks(self) -> int:
        span = int(self.node_pos.max()) + 1 if self.num_nodes else 1
        return max(1, -(-span // self.n_pad))

    @property
    def num_groups(self) -> int:
        return -(-self.feat_dim // self.t)

    @property
    def num_ciphertexts(self) -> int:
        return self.num_groups * self.blocks

    def position(self, v: int, f: int) -> tuple[int, int]:
        """(ciphertext index, slot index) of entry (node v, feature f)."""
        pos = int(self.node_pos[v])
        block, ring = divmod(pos, self.n_pad)
        ct = (f // self.t) * self.blocks + block
        return ct, (f % self.t) * self.n_pad + ring

    def lane_slots(self, ring_positions, lanes=None) -> np.ndarray:
        """Global slot indices of the given ring positions in each lane."""
        ring = np.asarray(ring_positions, dtype=np.int64)
        lanes = range(self.t) if lanes is None else lanes
        return np.concatenate([lane * self.n_pad + ring for lane in lanes])

    def with_feat_dim(self, feat_dim: int) -> "SlotLayout":
        """Same node layout, different matrix width (next layer's columns)."""
        t = self.t
        while t > max(feat_dim, 1):
            t >>= 1
        return SlotLayout(slots=self.slots, t=t, num_nodes=self.num_nodes,
                          feat_dim=feat_dim, node_pos=self.node_pos)

    def utilization(self) -> float:
        return (self.num_nodes * self.feat_dim) / (self.num_ciphertexts * self.slots)


def feasible_widths(slots: int, num_nodes: int, feat_dim: int) -> list[int]:
    """Powers of two t with t <= F and a full column lane (N*t <= S)."""
    out = []
    t = 1
    while t <= feat_dim:
        if num_nodes * t <= slots or t == 1:
            out.append(t)
        t <<= 1
    return out


def plan_packing(slots: int, num_nodes: int, feat_dim: int, out_dim: int, n: int,
                 rot_weight: float = DEFAULT_ROT_WEIGHT,
                 node_pos: np.ndarray | None = None) -> SlotLayout:
    """Choose the packing width and build the layout.

    When the next layer's matrix cannot fit a single ciphertext
    (S <= N * F_out) the operation count is width-independent, only
    rotations matter, and t = 1 is optimal.  Otherwise t minimizes
    :func:`objective_j` over feasible powers of two, ties toward smaller t.
    """
    if slots & (slots - 1):
        raise ValueError("slot count must be a power of two")
    if slots <= num_nodes * out_dim:
        t = 1
    else:
        best = None
        for cand in feasible_widths(slots, num_nodes, feat_dim):
            if num_nodes * cand > slots:
                continue
            j = objective_j(cand, feat_dim, n, rot_weight)
            if best is None or j < best[0]:
                best = (j, cand)
        t = best[1] if best else 1
    return SlotLayout(slots=slots, t=t, num_nodes=num_nodes,
                      feat_dim=feat_dim, node_pos=node_pos)


def pack(x: np.ndarray, layout: SlotLayout, level: int) -> list[CipherVec]:
    """Pack a matrix into ciphertexts; client-side, records no operations.

    Unused slots are zero with occupancy cleared; the mapping is exactly
    inverted by :func:`unpack`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layout.num_nodes, layout.feat_dim):
        raise ValueError(f"matrix shape {x.shape} does not match layout "
                         f"({layout.num_nodes}, {layout.feat_dim})")
    slots = np.zeros((layout.num_ciphertexts, layout.slots))
    occ = np.zeros((layout.num_ciphertexts, layout.slots), dtype=bool)
    pos = layout.node_pos
    block, ring = np.divmod(pos, layout.n_pad)
    for f in range(layout.feat_dim):
        ct_idx = (f // layout.t) * layout.blocks + block
        slot_idx = (f % layout.t) * layout.n_pad + ring
        slots[ct_idx, slot_idx] = x[:, f]
        occ[ct_idx, slot_idx] = True
    return [CipherVec(slots=slots[i], level=level, occupancy=occ[i])
            for i in range(layout.num_ciphertexts)]


def unpack(cts: list[CipherVec], layout: SlotLayout) -> np.ndarray:
    """Inverse of :func:`pack`."""
    if len(cts) != layout.num_ciphertexts:
        raise ValueError(f"expected {layout.num_ciphertexts} ciphertexts, got {len(cts)}")
    x = np.zeros((layout.num_nodes, layout.feat_dim))
    pos = layout.node_pos
    block, ring = np.divmod(pos, layout.n_pad)
    for f in range(layout.feat_dim):
        ct_idx = (f // layout.t) * layout.blocks + block
        slot_idx = (f % layout.t) * layout.n_pad + ring
        for v in range(layout.num_nodes):
            x[v, f] = cts[ct_idx[v]].slots[slot_idx[v]]
    return x
