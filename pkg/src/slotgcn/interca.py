"""Inter-ciphertext aggregation: pre-arranged neighbor streams, multiply, add.

At the first layer the client packs, offline and at zero homomorphic cost,
one reordered copy of the input per sampled-neighbor index: ciphertext k
holds, at node v's slot, the features of v's k-th sampled neighbor.  The
server then aggregates with one plaintext-weight multiply and one addition
per stream ciphertext.

The stream is packed so the executed operation count matches the closed-form
tally of ceil(F*n / t) multiplies and additions exactly.  When t does not
divide F, the leftover columns of all n streams share tail ciphertexts
(stacked across lanes); a single lane-reduction group of ceil(log2 t)
rotations folds the stacked partials onto the home lane.  Tails of width
greater than one column fall back to per-stream packing (see notes in the
plan's ``scheduled`` tally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph_io import SampledAdjacency
from .packing import SlotLayout, pack
from .slotvm import CipherVec, HocReport, add, internal_sum, pmult


def _ceil_log2(t: int) -> int:
    return int(math.ceil(math.log2(t))) if t > 1 else 0


@dataclass(frozen=True)
class StreamCt:
    """One pre-arranged input ciphertext: (neighbor index, column) per lane."""

    lanes: tuple  # length t, entries (k, f) or None
    block: int
    target_group: int  # accumulator group; tails target the last group
    is_tail: bool = False


@dataclass
class InterCaPlan:
    """Packing directives and predicted operation tally for one aggregation."""

    adj: SampledAdjacency
    layout: SlotLayout
    stream: list[StreamCt]
    tail_fold: bool  # True when shared tail ciphertexts need a lane reduction
    predicted: dict  # closed-form tally: pmult = add = ceil(F*n/t), rot = ceil(log2 t)
    scheduled: dict  # tally the executor will actually record

    @property
    def perms(self) -> np.ndarray:
        """sigma_k: column v holds neighbor perms[k][v]."""
        return self.adj.neighbors.T


def build_interca(adj: SampledAdjacency, layout: SlotLayout) -> InterCaPlan:
    """Lay out the neighbor streams for one aggregation pass."""
    n, t, feat = adj.n, layout.t, layout.feat_dim
    blocks = layout.blocks
    full_groups, r = divmod(feat, t)
    stream: list[StreamCt] = []
    for b in range(blocks):
        for k in range(n):
            for g in range(full_groups):
                lanes = tuple((k, g * t + lane) for lane in range(t))
                stream.append(StreamCt(lanes=lanes, block=b, target_group=g))
        if r == 1:
            # Shared tails: the lone leftover column of every stream, stacked
            # across lanes; one rotation group folds them home.
            for i in range(-(-n // t)):
                lanes = tuple((i * t + lane, feat - 1) if i * t + lane < n else None
                              for lane in range(t))
                stream.append(StreamCt(lanes=lanes, block=b,
                                       target_group=full_groups, is_tail=True))
        elif r > 1:
            for k in range(n):
                lanes = tuple((k, full_groups * t + lane) if lane < r else None
                              for lane in range(t))
                stream.append(StreamCt(lanes=lanes, block=b, target_group=full_groups))
    tail_fold = r == 1 and t > 1
    formula = math.ceil(feat * n / t) * blocks
    predicted = {"pmult": formula, "add": formula, "rot": _ceil_log2(t)}
    per_block = len(stream) // blocks
    scheduled = {
        "pmult": len(stream),
        "add": len(stream) + (_ceil_log2(t) if tail_fold else 0) * blocks,
        "rot": (_ceil_log2(t) if tail_fold else 0) * blocks,
        "stream_cts_per_block": per_block,
    }
    return InterCaPlan(adj=adj, layout=layout, stream=stream,
                       tail_fold=tail_fold, predicted=predicted,
                       scheduled=scheduled)


def _block_nodes(layout: SlotLayout, block: int):
    """(node ids, ring positions) of the nodes living in one block."""
    pos = layout.node_pos
    sel = (pos // layout.n_pad) == block
    nodes = np.nonzero(sel)[0]
    return nodes, pos[nodes] % layout.n_pad


def _weight_mask(plan: InterCaPlan, sct: StreamCt) -> np.ndarray:
    layout = plan.layout
    m = np.zeros(layout.slots)
    nodes, ring = _block_nodes(layout, sct.block)
    for lane, entry in enumerate(sct.lanes):
        if entry is None:
            continue
        k, _ = entry
        m[lane * layout.n_pad + ring] = plan.adj.weights[nodes, k]
    return m


def layer1_stream(plan: InterCaPlan, x: np.ndarray, level: int) -> list[CipherVec]:
    """Client-side packing of the neighbor streams; free of homomorphic cost."""
    layout = plan.layout
    out = []
    for sct in plan.stream:
        slots = np.zeros(layout.slots)
        occ = np.zeros(layout.slots, dtype=bool)
        nodes, ring = _block_nodes(layout, sct.block)
        for lane, entry in enumerate(sct.lanes):
            if entry is None:
                continue
            k, f = entry
            slots[lane * layout.n_pad + ring] = x[plan.adj.neighbors[nodes, k], f]
            occ[lane * layout.n_pad + ring] = True
        out.append(CipherVec(slots=slots, level=level, occupancy=occ))
    return out


def layer1_self(plan: InterCaPlan, x: np.ndarray, level: int) -> list[CipherVec]:
    """Self-term ciphertexts, pre-scaled by the per-node self weight.

    The client knows its own features, so the scaling happens at packing
    time; these seed the output accumulators for free.
    """
    layout = plan.layout
    scaled = x * plan.adj.self_weight[:, None]
    return pack(scaled, layout, level)


def exec_interca(plan: InterCaPlan, stream_cts: list[CipherVec],
                 self_cts: list[CipherVec], hoc: HocReport) -> list[CipherVec]:
    """Run the aggregation: output slot v = sum_k w[v,k] x[nbr_k(v)] + self term.

    Records exactly one PMult and one Add per stream ciphertext plus, when a
    shared-tail fold is present, one lane-reduction group of ceil(log2 t)
    rotations (and the same number of additions) per block.
    """
    layout = plan.layout
    if len(stream_cts) != len(plan.stream):
        raise ValueError("stream ciphertext count does not match plan")
    if len(self_cts) != layout.num_ciphertexts:
        raise ValueError("self ciphertext count does not match layout")
    acc = list(self_cts)
    blocks = layout.blocks
    tails: dict[int, CipherVec] = {}
    for sct, ct in zip(plan.stream, stream_cts):
        prod = pmult(ct, _weight_mask(plan, sct), hoc)
        idx = sct.target_group * blocks + sct.block
        if sct.is_tail:
            tails[sct.block] = (prod if sct.block not in tails
                                else add(tails[sct.block], prod, hoc))
        else:
            acc[idx] = add(acc[idx], prod, hoc)
    for b, tail in sorted(tails.items()):
        folded = internal_sum(tail, width=layout.t, hoc=hoc, stride=layout.n_pad)
        idx = (layout.num_groups - 1) * blocks + b
        acc[idx] = add(acc[idx], folded, hoc)
    return acc


def aggregate_layer1(adj: SampledAdjacency, x: np.ndarray, layout: SlotLayout,
                     level: int, hoc: HocReport) -> list[CipherVec]:
    """Plan, pack, and execute a first-layer aggregation in one call."""
    plan = build_interca(adj, layout)
    return exec_interca(plan, layer1_stream(plan, x, level),
                        layer1_self(plan, x, level), hoc)
