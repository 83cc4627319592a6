"""End-to-end encrypted GCN inference: per-layer aggregation-mode selection,
aggregation, combination, square activation, and oracle verification.

Layer structure: aggregate (neighbor mean via pre-arranged streams or
intra-ciphertext rotation scheduling), combine (dense column transform
against the plaintext weight matrix), then an optional x^2 activation.  The
first layer always uses the pre-arranged-stream mode since the client packs
those orders offline for free; inner layers choose by cost: pre-arranged
streams there have to be realized with the rotation scheduler and are billed
accordingly.

Every run is verified against :func:`oracle_forward`, a dense plaintext
forward pass over the same sampled adjacency; the simulator has no noise, so
agreement is exact up to float reassociation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph_io import SampledAdjacency
from .interca import build_interca, exec_interca, layer1_self, layer1_stream
from .packing import SlotLayout, pack, unpack
from .slotvm import CipherVec, CostModel, HocReport, add, cmult, pmult, rot
from .spintra import (
    RotationSchedule,
    SpintraOpts,
    complete_aggregation,
    exec_spintra,
    plan_spintra,
)

INTER = "inter"
SPINTRA = "spintra"
AUTO = "auto"


@dataclass
class LayerSpec:
    f_in: int
    f_out: int
    mode: str = AUTO
    activation: str = "square"  # "square" | "none"


@dataclass
class ModeDecision:
    layer: int
    chosen: str
    inter_cost: float
    spintra_cost: float
    c: float
    forced: bool = False


@dataclass
class VerifyReport:
    max_abs: float
    max_rel: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tolerance


@dataclass
class InferResult:
    output: np.ndarray
    hoc: HocReport
    verify: VerifyReport
    decisions: list
    schedules: dict  # layer index -> RotationSchedule (rotation-scheduled layers)
    depth: int
    layouts: list


def select_mode(layer_index: int, f_in: int, num_nodes: int, n: int, t: int,
                c: float, rot_weight: float = 20.0) -> ModeDecision:
    """Latency-aware per-layer aggregation mode.

    Pre-arranged streams cost ~2*ceil(F*n/t) cheap ops; rotation scheduling
    costs ~(rot_weight/2)*c*n*log2(N)^2 where c in [0,1] captures how far
    below the worst case the scheduler lands.  Layer 1 is always the stream
    mode (the client provides those ciphertexts offline).
    """
    inter_cost = 2.0 * math.ceil(f_in * n / t)
    lg = math.log2(max(num_nodes, 2))
    spintra_cost = (rot_weight / 2.0) * c * n * lg * lg
    if layer_index <= 1:
        return ModeDecision(layer=layer_index, chosen=INTER, inter_cost=inter_cost,
                            spintra_cost=spintra_cost, c=c, forced=True)
    chosen = INTER if inter_cost <= spintra_cost else SPINTRA
    return ModeDecision(layer=layer_index, chosen=chosen, inter_cost=inter_cost,
                        spintra_cost=spintra_cost, c=c)


def combine(agg_cts: list[CipherVec], w: np.ndarray, layout: SlotLayout,
            out_layout: SlotLayout, hoc: HocReport) -> list[CipherVec]:
    """Dense column transform: output column f' = sum_f W[f, f'] * column_f.

    Width 1: one plaintext multiply per (input column, output column) and the
    matching additions; no rotations.  Width t > 1: lane-shifted masked
    accumulation, t-1 lane rotations per output ciphertext (one for t = 2).
    One multiplicative level either way.
    """
    f_in, f_out = layout.feat_dim, out_layout.feat_dim
    if w.shape != (f_in, f_out):
        raise ValueError(f"weight shape {w.shape} != ({f_in}, {f_out})")
    t, blocks = layout.t, layout.blocks
    if t == 1:
        out = []
        for fp in range(f_out):
            for b in range(blocks):
                acc = None
                for f in range(f_in):
                    prod = pmult(agg_cts[f * blocks + b], float(w[f, fp]), hoc)
                    acc = prod if acc is None else add(acc, prod, hoc)
                out.append(acc)
        return out
    if out_layout.t != t:
        raise ValueError("combine requires matching packing width across layers")
    n_pad = layout.n_pad
    groups_in, groups_out = layout.num_groups, out_layout.num_groups
    out = []
    for g in range(groups_out):
        folded = None
        for d in range(t):
            acc = None
            for j in range(groups_in):
                m = np.zeros(layout.slots)
                nonzero = False
                for lane in range(t):
                    f = j * t + lane
                    fp = g * t + ((lane - d) % t)
                    if f < f_in and fp < f_out:
                        m[lane * n_pad:(lane + 1) * n_pad] = w[f, fp]
                        nonzero = True
                if not nonzero:
                    continue
                prod = pmult(agg_cts[j], m, hoc)
                acc = prod if acc is None else add(acc, prod, hoc)
            if acc is None:
                continue
            shifted = rot(acc, d * n_pad, hoc)
            folded = shifted if folded is None else add(folded, shifted, hoc)
        out.append(folded)
    return out


def activate_square(cts: list[CipherVec], hoc: HocReport) -> list[CipherVec]:
    """Slot-wise x^2 via one ciphertext-ciphertext multiply per ciphertext."""
    return [cmult(c, c, hoc) for c in cts]


def oracle_forward(adj: SampledAdjacency, x: np.ndarray,
                   weights: list[np.ndarray], layers: list[LayerSpec]) -> np.ndarray:
    """Dense plaintext reference over the same sampled adjacency."""
    dense = adj.dense()
    h = np.asarray(x, dtype=np.float64)
    for spec, w in zip(layers, weights):
        h = (dense @ h) @ w
        if spec.activation == "square":
            h = h * h
    return h


def _inter_via_rotations(adj, cts, layout, hoc, spintra_opts):
    """Inner-layer stream aggregation: permutations realized by the scheduler.

    The raw neighbor ciphertexts are produced with unweighted delivery masks,
    then combined stream-by-stream with plaintext weight masks, exactly like
    the first-layer path but with the reordering billed.  Stream reassignment
    stays off: the per-stream weight masks assume the canonical
    neighbor-to-stream mapping.
    """
    opts = SpintraOpts(aoo=False, cpoo_threshold=spintra_opts.cpoo_threshold,
                       fold_weights=False)
    schedule = plan_spintra(adj, layout, opts)
    results = exec_spintra(schedule, cts, hoc, fold_weights=False)
    pos = layout.node_pos
    groups, blocks = layout.num_groups, layout.blocks
    out = []
    for g in range(groups):
        for b in range(blocks):
            nodes = np.nonzero((pos // layout.n_pad) == b)[0]
            ring = pos[nodes] % layout.n_pad
            self_mask = np.zeros(layout.slots)
            for lane in range(layout.t):
                self_mask[lane * layout.n_pad + ring] = adj.self_weight[nodes]
            acc = pmult(cts[g * blocks + b], self_mask, hoc)
            for k in range(adj.n):
                part = results.get((k, b))
                if part is None or part[g] is None:
                    continue
                wmask = np.zeros(layout.slots)
                for lane in range(layout.t):
                    wmask[lane * layout.n_pad + ring] = adj.weights[nodes, k]
                acc = add(acc, pmult(part[g], wmask, hoc), hoc)
            out.append(acc)
    return out, schedule


def required_depth(layers: list[LayerSpec]) -> int:
    return sum(2 + (1 if s.activation == "square" else 0) for s in layers)


def infer(adj: SampledAdjacency, x: np.ndarray, weights: list[np.ndarray],
          layers: list[LayerSpec], *, slots: int, levels: int, t: int = 1,
          node_pos: np.ndarray | None = None,
          spintra_opts: SpintraOpts | None = None,
          rot_weight: float = 20.0, cost_model: CostModel | None = None,
          c_init: float = 0.5, tolerance: float = 1e-6) -> InferResult:
    """Run the full encrypted forward pass and verify it against the oracle.

    The inner-layer aggregation mode is chosen per layer: "auto" runs a dry
    scheduling pass to measure the realized rotation count, feeds the
    measured c factor into the cost comparison, and commits to the cheaper
    mode.  Raises ValueError when the level budget cannot cover the
    multiplicative depth of the layer chain.
    """
    spintra_opts = spintra_opts or SpintraOpts()
    depth = required_depth(layers)
    if levels < depth:
        raise ValueError(
            f"level budget too small: chain needs {depth} levels "
            f"(2 per layer + 1 per square activation), configured {levels}")
    while t > max(1, min(min(s.f_in for s in layers), min(s.f_out for s in layers))):
        t >>= 1
    hoc = HocReport(cost_model=cost_model or CostModel())
    layouts = [SlotLayout(slots=slots, t=t, num_nodes=adj.num_nodes,
                          feat_dim=layers[0].f_in, node_pos=node_pos)]
    cts = pack(x, layouts[0], level=levels)
    decisions: list[ModeDecision] = []
    schedules: dict[int, RotationSchedule] = {}
    c_factor = c_init
    for idx, spec in enumerate(layers, start=1):
        layout = layouts[-1]
        out_layout = layout.with_feat_dim(spec.f_out)
        if out_layout.t != layout.t:
            raise ValueError("packing width must fit every layer's dimensions")
        with hoc.scoped(f"layer{idx}/agg"):
            if spec.mode == AUTO:
                if idx == 1:
                    decision = select_mode(idx, spec.f_in, adj.num_nodes, adj.n,
                                           layout.t, c_factor, rot_weight)
                else:
                    dry = plan_spintra(adj, layout, spintra_opts)
                    worst = adj.n * math.log2(max(layout.n_pad, 2)) ** 2
                    c_factor = min(1.0, dry.rot_count() / max(worst, 1.0))
                    decision = select_mode(idx, spec.f_in, adj.num_nodes, adj.n,
                                           layout.t, c_factor, rot_weight)
                    if decision.chosen == SPINTRA:
                        schedules[idx] = dry
            else:
                decision = ModeDecision(layer=idx, chosen=spec.mode, inter_cost=0.0,
                                        spintra_cost=0.0, c=c_factor, forced=True)
            decisions.append(decision)
            if decision.chosen == INTER and idx == 1:
                plan = build_interca(adj, layout)
                agg = exec_interca(plan, layer1_stream(plan, x, levels),
                                   layer1_self(plan, x, levels), hoc)
            elif decision.chosen == INTER:
                agg, sched = _inter_via_rotations(adj, cts, layout, hoc, spintra_opts)
                schedules[idx] = sched
            else:
                sched = schedules.get(idx) or plan_spintra(adj, layout, spintra_opts)
                schedules[idx] = sched
                results = exec_spintra(sched, cts, hoc,
                                       fold_weights=sched.opts.fold_weights)
                agg = complete_aggregation(adj, results, cts, layout, hoc)
        with hoc.scoped(f"layer{idx}/combine"):
            cts = combine(agg, weights[idx - 1], layout, out_layout, hoc)
        if spec.activation == "square":
            with hoc.scoped(f"layer{idx}/act"):
                cts = activate_square(cts, hoc)
        layouts.append(out_layout)
    output = unpack(cts, layouts[-1])
    ref = oracle_forward(adj, x, weights, layers)
    diff = np.abs(output - ref)
    denom = np.maximum(np.abs(ref), 1.0)
    verify = VerifyReport(max_abs=float(diff.max(initial=0.0)),
                          max_rel=float((diff / denom).max(initial=0.0)),
                          tolerance=tolerance)
    return InferResult(output=output, hoc=hoc, verify=verify,
                       decisions=decisions, schedules=schedules, depth=depth,
                       layouts=layouts)


def dry_run(adj: SampledAdjacency, layers: list[LayerSpec], *, slots: int,
            levels: int, t: int = 1, node_pos: np.ndarray | None = None,
            spintra_opts: SpintraOpts | None = None, rot_weight: float = 20.0,
            cost_model: CostModel | None = None, c_init: float = 0.5):
    """Analytic cost of a run: schedules are planned, nothing is executed.

    Returns (HocReport, decisions, schedules).  Counts match what the
    executor would record, with per-stage levels approximated by the nominal
    level at that depth (exact for level-flat cost models).
    """
    spintra_opts = spintra_opts or SpintraOpts()
    hoc = HocReport(cost_model=cost_model or CostModel())
    while t > max(1, min(min(s.f_in for s in layers), min(s.f_out for s in layers))):
        t >>= 1
    layout = SlotLayout(slots=slots, t=t, num_nodes=adj.num_nodes,
                        feat_dim=layers[0].f_in, node_pos=node_pos)
    decisions: list[ModeDecision] = []
    schedules: dict[int, RotationSchedule] = {}
    level = levels
    c_factor = c_init
    for idx, spec in enumerate(layers, start=1):
        layout = layout.with_feat_dim(spec.f_in)
        blocks, groups = layout.blocks, layout.num_groups
        with hoc.scoped(f"layer{idx}/agg"):
            if idx == 1 and spec.mode in (AUTO, INTER):
                decision = select_mode(idx, spec.f_in, adj.num_nodes, adj.n,
                                       layout.t, c_factor, rot_weight)
                plan = build_interca(adj, layout)
                hoc.record("PMult", level, plan.scheduled["pmult"])
                hoc.record("Add", level - 1, plan.scheduled["add"])
                if plan.scheduled["rot"]:
                    hoc.record("Rot", level - 1, plan.scheduled["rot"])
            else:
                sched = plan_spintra(adj, layout, spintra_opts)
                worst = adj.n * math.log2(max(layout.n_pad, 2)) ** 2
                c_factor = min(1.0, sched.rot_count() / max(worst, 1.0))
                if spec.mode == AUTO:
                    decision = select_mode(idx, spec.f_in, adj.num_nodes, adj.n,
                                           layout.t, c_factor, rot_weight)
                else:
                    decision = ModeDecision(layer=idx, chosen=spec.mode, inter_cost=0.0,
                                            spintra_cost=0.0, c=c_factor, forced=True)
                schedules[idx] = sched
                per_group = sched.op_counts()
                hoc.record("Rot", level, per_group["Rot"] * groups)
                hoc.record("PMult", level, per_group["PMult"] * groups)
                if per_group["Add"]:
                    hoc.record("Add", level - 1, per_group["Add"] * groups)
                # Completion: self-term multiply plus one add per output stream.
                hoc.record("PMult", level, groups * blocks)
                hoc.record("Add", level - 1, groups * blocks * adj.n)
                if decision.chosen == INTER:
                    hoc.record("PMult", level, groups * blocks * adj.n)
            decisions.append(decision)
        level -= 1
        with hoc.scoped(f"layer{idx}/combine"):
            if layout.t == 1:
                hoc.record("PMult", level, spec.f_in * spec.f_out * blocks)
                hoc.record("Add", level - 1, (spec.f_in - 1) * spec.f_out * blocks)
            else:
                out_groups = -(-spec.f_out // layout.t)
                hoc.record("PMult", level, layout.t * groups * out_groups)
                hoc.record("Add", level - 1,
                           (layout.t * groups - 1) * out_groups)
                hoc.record("Rot", level - 1, (layout.t - 1) * out_groups)
        level -= 1
        if spec.activation == "square":
            with hoc.scoped(f"layer{idx}/act"):
                out_blocks = layout.with_feat_dim(spec.f_out).num_ciphertexts
                hoc.record("CMult", level, out_blocks)
            level -= 1
    return hoc, decisions, schedules


def sweep_packing(adj: SampledAdjacency, layers: list[LayerSpec], *, slots: int,
                  levels: int, node_pos: np.ndarray | None = None,
                  spintra_opts: SpintraOpts | None = None,
                  rot_weight: float = 20.0,
                  cost_model: CostModel | None = None) -> dict:
    """Empirical width search: dry-run the whole chain per candidate width.

    Complements the analytic planner: scheduler conflicts make dense packing
    non-monotone, so the empirical optimum can differ from the closed form.
    """
    from .packing import feasible_widths

    costs = {}
    max_t = max(1, min(min(s.f_in for s in layers), min(s.f_out for s in layers)))
    for t in feasible_widths(slots, adj.num_nodes, layers[0].f_in):
        if adj.num_nodes * t > slots or t > max_t:
            continue
        hoc, _, _ = dry_run(adj, layers, slots=slots, levels=levels, t=t,
                            node_pos=node_pos, spintra_opts=spintra_opts,
                            rot_weight=rot_weight, cost_model=cost_model)
        costs[t] = hoc.latency
    best = min(costs, key=lambda k: (costs[k], k))
    return {"costs": costs, "best_t": best}
