"""Sparse intra-ciphertext aggregation: bit-serial rotation scheduling.

One packed ciphertext is turned into n "neighbor ciphertexts" by decomposing
every node's required shift into powers of two and rotating all nodes in
lockstep, least-significant bit first.  Each step recombines a stay-masked
original with a move-masked rotated copy; a mover landing on an occupied slot
is evicted to an extra ciphertext, and tokens that reach their target slot
are masked out into the per-neighbor-index result accumulator.

Two planner optimizations operate on top of the bit-serial core:

* Aggregation-order reassignment (``aoo_assign``): mean aggregation is
  order-invariant, so which sampled neighbor feeds which output index is
  free; tokens are regrouped to shrink the per-stream union of shift bits.
* Processing-order optimization (``cpoo_optimize``): ciphertexts whose live
  density falls below a threshold are postponed, merged with slot-disjoint
  peers, and their uninterrupted rotation runs collapse into single
  large-step rotations.

The emitted :class:`RotationSchedule` is symbolic; :func:`exec_spintra`
replays it on the slot VM, once per feature-column group of the layer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .graph_io import SampledAdjacency
from .packing import SlotLayout
from .slotvm import CipherVec, HocReport, add, mask, pmult, rot


@dataclass
class Token:
    """One (target node, output index) delivery obligation."""

    target: int
    source: int
    out: int
    weight: float
    shift: int  # (ring pos of source - ring pos of target) mod ring
    remaining: int
    pos: int  # current ring position
    src_block: int
    dst_block: int


@dataclass
class SpintraOpts:
    aoo: bool = True
    cpoo_threshold: float = 0.25
    fold_weights: bool = True  # apply aggregation weights inside delivery masks


@dataclass
class RotationSchedule:
    """Emitted op stream plus the planning provenance needed to replay it."""

    layout: SlotLayout
    n_out: int
    init_binding: tuple  # (ct_id, out_k, src_block) for the free initial copies
    ops: list
    masks: list  # mask id -> (ring positions tuple, weights tuple | None)
    tokens: list  # tokens as handed to the planner (pre-mutation copies)
    opts: SpintraOpts
    meta: dict = field(default_factory=dict)

    def rot_count(self) -> int:
        return sum(1 for op in self.ops if op[0] in ("rot", "rot_full"))

    def op_counts(self) -> dict:
        """Per-group op tally {Rot, PMult, Add} the executor will record."""
        rots = pmults = adds = 0
        seen_results: set = set()
        for op in self.ops:
            kind = op[0]
            if kind in ("rot", "rot_full"):
                rots += 1
            elif kind == "recombine":
                _, _, _, stay, moves = op
                products = (1 if stay is not None else 0) + len(moves)
                pmults += products
                adds += products - 1
            elif kind == "evict":
                pmults += 1
                adds += 0 if op[6] else 1
            elif kind == "deliver":
                _, _, _, k, block, _ = op
                pmults += 1
                if (k, block) in seen_results:
                    adds += 1
                else:
                    seen_results.add((k, block))
            elif kind == "union":
                adds += 1
        return {"Rot": rots, "PMult": pmults, "Add": adds}


def compute_shifts(adj: SampledAdjacency, layout: SlotLayout,
                   fold_weights: bool = True) -> list[Token]:
    """One token per (target, sampled neighbor); zero-weight padding is skipped.

    Shifts live in the column sub-ring of length S/t.  With block layouts a
    token starts in its source's block ciphertext and delivers into its
    target's block accumulator; the ring position arithmetic is identical.
    """
    ring = layout.n_pad
    pos = layout.node_pos
    tokens = []
    for v in range(adj.num_nodes):
        for k in range(adj.n):
            w = float(adj.weights[v, k])
            if w == 0.0:
                continue
            u = int(adj.neighbors[v, k])
            src_ring, dst_ring = int(pos[u]) % ring, int(pos[v]) % ring
            shift = (src_ring - dst_ring) % ring
            tokens.append(Token(
                target=v, source=u, out=k, weight=w if fold_weights else 1.0,
                shift=shift, remaining=shift, pos=src_ring,
                src_block=int(pos[u]) // ring, dst_block=int(pos[v]) // ring,
            ))
    return tokens


def _bit_union_estimate(tokens) -> int:
    unions: dict = {}
    for tok in tokens:
        key = (tok.out, tok.src_block)
        unions[key] = unions.get(key, 0) | tok.shift
    return sum(bin(u).count("1") for u in unions.values())


def aoo_assign(tokens: list[Token], n_out: int) -> list[Token]:
    """Reassign which sampled neighbor feeds which output stream.

    Minimizes the scheduler estimate sum_k popcount(union of shift bits per
    stream): exhaustive over output choices per node for n <= 6, greedy
    (largest popcount first, least union growth) otherwise.  Never returns an
    assignment whose estimate exceeds the identity's.
    """
    by_target: dict[int, list[Token]] = {}
    for tok in tokens:
        by_target.setdefault(tok.target, []).append(tok)
    unions: dict = {}
    out_tokens: list[Token] = []
    for v in sorted(by_target):
        toks = by_target[v]
        m = len(toks)
        if n_out <= 6:
            best = None
            for perm in itertools.permutations(range(n_out), m):
                grown = dict(unions)
                for tok, k in zip(toks, perm):
                    key = (k, tok.src_block)
                    grown[key] = grown.get(key, 0) | tok.shift
                cost = sum(bin(u).count("1") for u in grown.values())
                if best is None or (cost, perm) < best:
                    best = (cost, perm)
            chosen = best[1]
        else:
            order = sorted(range(m), key=lambda i: (-bin(toks[i].shift).count("1"), i))
            slots_ = [0] * m
            used: set = set()
            for i in order:
                bits = toks[i].shift
                scored = []
                for k in range(n_out):
                    if k in used:
                        continue
                    u = unions.get((k, toks[i].src_block), 0)
                    scored.append((bin(u | bits).count("1") - bin(u).count("1"), k))
                _, k = min(scored)
                used.add(k)
                slots_[i] = k
            chosen = tuple(slots_)
        for tok, k in zip(toks, chosen):
            key = (k, tok.src_block)
            unions[key] = unions.get(key, 0) | tok.shift
            out_tokens.append(replace(tok, out=k))
    if _bit_union_estimate(out_tokens) > _bit_union_estimate(tokens):
        return [replace(t) for t in tokens]
    return out_tokens


class _Ct:
    """Planner-side working ciphertext: token occupancy and physical support."""

    __slots__ = ("cid", "units", "support", "is_extra")

    def __init__(self, cid, units=None, support=None, is_extra=False):
        self.cid = cid
        self.units = units if units is not None else {}  # ring pos -> [token idx]
        # Ring positions that may hold nonzero values; None means the whole
        # ring (initial copies carry every input slot as residue).
        self.support = support
        self.is_extra = is_extra

    def live_count(self) -> int:
        return sum(len(u) for u in self.units.values())

    def density(self, ring: int) -> float:
        return self.live_count() / ring


class _Planner:
    def __init__(self, tokens, layout, opts):
        self.layout = layout
        self.opts = opts
        self.ring = layout.n_pad
        self.slots = layout.slots
        self.nbits = self.ring.bit_length() - 1
        self.toks = [replace(t) for t in tokens]
        self.ops: list = []
        self.masks: list = []
        self.frozen: set = set()
        self.initialized_extras: set = set()
        self.delivered = 0
        self.meta = {"conflicts": 0, "extras": 0, "unions": 0}
        binding = sorted({(t.out, t.src_block) for t in self.toks})
        self.binding = tuple((i, k, b) for i, (k, b) in enumerate(binding))
        self.cts: dict[int, _Ct] = {i: _Ct(i) for i in range(len(binding))}
        self.next_id = len(binding)
        ct_of = {key: i for i, (key) in enumerate(binding)}
        for idx, tok in enumerate(self.toks):
            ct = self.cts[ct_of[(tok.out, tok.src_block)]]
            ct.units.setdefault(tok.pos, []).append(idx)
        self.meta["cts_created"] = len(self.cts)

    def new_mask(self, positions, weights=None) -> int:
        self.masks.append((tuple(positions),
                           None if weights is None else tuple(weights)))
        return len(self.masks) - 1

    def deliver_sweep(self, bit: int):
        for cid in sorted(self.cts):
            if cid in self.frozen:
                continue
            ct = self.cts[cid]
            batches: dict = {}
            for p in sorted(ct.units):
                done = [i for i in ct.units[p] if self.toks[i].remaining == 0]
                if not done:
                    continue
                for i in done:
                    tok = self.toks[i]
                    batches.setdefault((tok.out, tok.dst_block), []).append((p, i))
                keep = [i for i in ct.units[p] if self.toks[i].remaining != 0]
                if keep:
                    ct.units[p] = keep
                else:
                    del ct.units[p]
            for (k, blk), items in sorted(batches.items()):
                mid = self.new_mask([p for p, _ in items],
                                    [self.toks[i].weight for _, i in items])
                self.ops.append(("deliver", bit, cid, k, blk, mid))
                self.delivered += len(items)

    def _eviction_target(self, dest: int, src_cid: int) -> int:
        for ecid in sorted(self.cts):
            ec = self.cts[ecid]
            if not ec.is_extra or ecid == src_cid or ecid in self.frozen:
                continue
            if dest not in ec.units and (ec.support is None or dest not in ec.support):
                return ecid
        ecid = self.next_id
        self.next_id += 1
        self.cts[ecid] = _Ct(ecid, support=set(), is_extra=True)
        self.meta["extras"] += 1
        self.meta["cts_created"] += 1
        return ecid

    def process_ct(self, cid: int, bit: int):
        ct = self.cts[cid]
        delta = 1 << bit
        full_ring = self.ring == self.slots
        groups: dict[int, list[tuple[int, list[int]]]] = {}
        stay_units: dict[int, list[int]] = {}
        for p in sorted(ct.units):
            unit = ct.units[p]
            moving = [i for i in unit if (self.toks[i].remaining >> bit) & 1]
            staying = [i for i in unit if not (self.toks[i].remaining >> bit) & 1]
            if staying:
                stay_units[p] = staying
            if moving:
                gd = delta if (full_ring or p >= delta) else (delta - self.ring) % self.slots
                groups.setdefault(gd, []).append((p, moving))
        if not groups:
            return
        if not stay_units and len(groups) == 1:
            gdelta, arrivals = next(iter(groups.items()))
            self.ops.append(("rot_full", bit, cid, gdelta, ct.density(self.ring)))
            new_units = {}
            for p, idxs in arrivals:
                dest = (p - delta) % self.ring
                for i in idxs:
                    self.toks[i].pos = dest
                    self.toks[i].remaining -= delta
                new_units[dest] = idxs
            ct.units = new_units
            if ct.support is not None:
                ct.support = {(p - delta) % self.ring for p in ct.support}
            return
        claims: dict[int, list[int]] = dict(stay_units)
        moved: dict[int, list[int]] = {}  # gdelta -> dest positions kept in ct
        evictions: dict[tuple[int, int], list[int]] = {}  # (gdelta, target) -> dests
        for gdelta in sorted(groups):
            for p, idxs in groups[gdelta]:
                dest = (p - delta) % self.ring
                if dest in claims:
                    self.meta["conflicts"] += 1
                    target = self._eviction_target(dest, cid)
                    ec = self.cts[target]
                    ec.units[dest] = idxs
                    ec.support.add(dest)
                    evictions.setdefault((gdelta, target), []).append(dest)
                else:
                    claims[dest] = idxs
                    moved.setdefault(gdelta, []).append(dest)
                for i in idxs:
                    self.toks[i].pos = dest
                    self.toks[i].remaining -= delta
        for gdelta in sorted(set(moved) | {g for g, _ in evictions}):
            self.ops.append(("rot", bit, cid, gdelta))
        stay_mid = self.new_mask(sorted(stay_units)) if stay_units else None
        moves = tuple((gd, self.new_mask(sorted(moved[gd]))) for gd in sorted(moved))
        if stay_mid is not None or moves:
            self.ops.append(("recombine", bit, cid, stay_mid, moves))
        for (gdelta, target), dests in sorted(evictions.items()):
            is_new = target not in self.initialized_extras
            self.initialized_extras.add(target)
            mid = self.new_mask(sorted(dests))
            self.ops.append(("evict", bit, cid, gdelta, mid, target, is_new))
        ct.units = claims
        ct.support = set(claims)
        if not ct.units:
            del self.cts[cid]

    def freeze_sparse(self):
        threshold = self.opts.cpoo_threshold
        if threshold <= 0:
            return
        for cid in sorted(self.cts):
            if cid in self.frozen:
                continue
            ct = self.cts[cid]
            if ct.units and ct.density(self.ring) < threshold:
                self.frozen.add(cid)

    def run_bits(self, allow_freeze: bool):
        for bit in range(self.nbits):
            for cid in sorted(self.cts):
                if cid in self.cts and cid not in self.frozen:
                    self.process_ct(cid, bit)
            self.deliver_sweep(bit)
            if allow_freeze:
                self.freeze_sparse()

    def merge_frozen(self):
        """Union slot-disjoint postponed ciphertexts before resuming them."""
        postponed = [cid for cid in sorted(self.frozen)
                     if cid in self.cts and self.cts[cid].units]
        self.frozen.clear()
        hosts: list[int] = []
        for cid in postponed:
            ct = self.cts[cid]
            placed = False
            for hid in hosts:
                host = self.cts[hid]
                if host.support is None or ct.support is None:
                    continue
                if not (host.support & ct.support):
                    self.ops.append(("union", self.nbits, hid, cid))
                    self.meta["unions"] += 1
                    host.units.update(ct.units)
                    host.support |= ct.support
                    del self.cts[cid]
                    placed = True
                    break
            if not placed:
                hosts.append(cid)

    def run(self) -> RotationSchedule:
        self.deliver_sweep(-1)
        self.freeze_sparse()
        self.run_bits(allow_freeze=True)
        if self.frozen:
            self.merge_frozen()
            self.run_bits(allow_freeze=False)
        live_left = sum(ct.live_count() for ct in self.cts.values())
        assert self.delivered == len(self.toks) and live_left == 0, (
            f"token conservation violated: delivered {self.delivered} of "
            f"{len(self.toks)}, {live_left} still live")
        return RotationSchedule(
            layout=self.layout,
            n_out=max((t.out for t in self.toks), default=-1) + 1,
            init_binding=self.binding, ops=self.ops, masks=self.masks,
            tokens=None, opts=self.opts, meta=self.meta)


def build_schedule(tokens: list[Token], layout: SlotLayout,
                   opts: SpintraOpts | None = None) -> RotationSchedule:
    """Plan the bit-serial rotation stream for the given tokens (LSB first).

    Ciphertexts whose live density drops below ``opts.cpoo_threshold`` are
    postponed to a second pass where slot-disjoint ones are merged first.
    Raises AssertionError on token conservation violations (a planner bug,
    not an input error).
    """
    opts = opts or SpintraOpts()
    sched = _Planner(tokens, layout, opts).run()
    sched.tokens = [replace(t) for t in tokens]
    sched.meta["schedule_rot"] = sched.rot_count()
    return sched


def _merge_rot_runs(schedule: RotationSchedule, threshold: float) -> RotationSchedule:
    """Collapse uninterrupted full-rotation runs of sparse ciphertexts."""
    slots = schedule.layout.slots
    out: list = []
    pending: dict[int, int] = {}  # ct -> index into out of a mergeable rot_full
    for op in schedule.ops:
        kind = op[0]
        if kind == "rot_full" and op[4] < threshold:
            cid = op[2]
            if cid in pending:
                idx = pending[cid]
                prev = out[idx]
                out[idx] = ("rot_full", prev[1], cid,
                            (prev[3] + op[3]) % slots, min(prev[4], op[4]))
                continue
            pending[cid] = len(out)
            out.append(op)
            continue
        if kind == "rot_full":
            touched = {op[2]}
        elif kind in ("rot", "recombine", "deliver"):
            touched = {op[2]}
        elif kind == "evict":
            touched = {op[2], op[5]}
        else:  # union
            touched = {op[2], op[3]}
        for cid in touched:
            pending.pop(cid, None)
        out.append(op)
    merged = RotationSchedule(layout=schedule.layout, n_out=schedule.n_out,
                              init_binding=schedule.init_binding, ops=out,
                              masks=schedule.masks, tokens=schedule.tokens,
                              opts=schedule.opts, meta=dict(schedule.meta))
    merged.meta["schedule_rot"] = merged.rot_count()
    return merged


def cpoo_optimize(schedule: RotationSchedule, threshold: float) -> RotationSchedule:
    """Processing-order rewrite: postpone, merge, and fuse sparse rotations.

    Re-plans the schedule's tokens with the given density threshold and fuses
    uninterrupted rotation runs of sparse ciphertexts; returns whichever of
    the rewrite and the original schedules fewer rotations.  Delivered slot
    values are identical either way.
    """
    if threshold <= 0:
        return schedule
    opts = replace(schedule.opts, cpoo_threshold=threshold)
    replanned = build_schedule(schedule.tokens, schedule.layout, opts)
    replanned = _merge_rot_runs(replanned, threshold)
    if replanned.rot_count() <= schedule.rot_count():
        return replanned
    return schedule


def plan_spintra(adj: SampledAdjacency, layout: SlotLayout,
                 opts: SpintraOpts | None = None) -> RotationSchedule:
    """Shift computation, order reassignment, scheduling, and rewrites.

    The output-order reassignment is chosen first (kept only if it does not
    increase the scheduled rotation count), then the processing-order rewrite
    is applied with the same guard, so neither optimization can ever make the
    emitted schedule worse.
    """
    opts = opts or SpintraOpts()
    tokens = compute_shifts(adj, layout, fold_weights=opts.fold_weights)
    base_opts = replace(opts, cpoo_threshold=0.0)
    sched = build_schedule(tokens, layout, base_opts)
    if opts.aoo and adj.n > 1:
        alt = build_schedule(aoo_assign(tokens, adj.n), layout, base_opts)
        if alt.rot_count() < sched.rot_count():
            sched = alt
    if opts.cpoo_threshold > 0:
        sched = cpoo_optimize(sched, opts.cpoo_threshold)
    return sched


def _expand_mask(schedule: RotationSchedule, mid: int, weighted: bool) -> np.ndarray:
    layout = schedule.layout
    positions, weights = schedule.masks[mid]
    arr = np.zeros(layout.slots)
    vals = weights if (weighted and weights is not None) else [1.0] * len(positions)
    for lane in range(layout.t):
        base = lane * layout.n_pad
        for p, w in zip(positions, vals):
            arr[base + p] = w
    return arr


def exec_spintra(schedule: RotationSchedule, input_cts: list[CipherVec],
                 hoc: HocReport, fold_weights: bool = True) -> dict:
    """Replay the schedule on the VM for every feature-column group.

    Returns {(out_k, block): [CipherVec per group]}: output k holds, at node
    v's slot, the (weight-scaled) feature of v's k-th sampled neighbor.
    """
    layout = schedule.layout
    groups, blocks = layout.num_groups, layout.blocks
    if len(input_cts) != groups * blocks:
        raise ValueError("input ciphertext count does not match layout")
    results: dict = {}
    mask_cache: dict = {}

    def mask_arr(mid, weighted=False):
        key = (mid, weighted)
        if key not in mask_cache:
            mask_cache[key] = _expand_mask(schedule, mid, weighted)
        return mask_cache[key]

    for g in range(groups):
        regs: dict[int, CipherVec] = {}
        temps: dict[tuple[int, int], CipherVec] = {}
        for cid, _k, blk in schedule.init_binding:
            regs[cid] = input_cts[g * blocks + blk]
        for op in schedule.ops:
            kind = op[0]
            if kind == "rot_full":
                regs[op[2]] = rot(regs[op[2]], op[3], hoc)
            elif kind == "rot":
                temps[(op[2], op[3])] = rot(regs[op[2]], op[3], hoc)
            elif kind == "recombine":
                _, _, cid, stay_mid, moves = op
                parts = []
                if stay_mid is not None:
                    parts.append(mask(regs[cid], mask_arr(stay_mid), hoc))
                for gdelta, move_mid in moves:
                    parts.append(mask(temps[(cid, gdelta)], mask_arr(move_mid), hoc))
                acc = parts[0]
                for part in parts[1:]:
                    acc = add(acc, part, hoc)
                regs[cid] = acc
            elif kind == "evict":
                _, _, src, gdelta, mid, dst, is_new = op
                prod = mask(temps[(src, gdelta)], mask_arr(mid), hoc)
                regs[dst] = prod if is_new else add(regs[dst], prod, hoc)
            elif kind == "deliver":
                _, _, cid, k, blk, mid = op
                if fold_weights:
                    prod = pmult(regs[cid], mask_arr(mid, weighted=True), hoc)
                else:
                    prod = mask(regs[cid], mask_arr(mid), hoc)
                key = (k, blk)
                if key not in results:
                    results[key] = [None] * groups
                if results[key][g] is None:
                    results[key][g] = prod
                else:
                    results[key][g] = add(results[key][g], prod, hoc)
            elif kind == "union":
                _, _, dst, src = op
                regs[dst] = add(regs[dst], regs[src], hoc)
                del regs[src]
            else:  # pragma: no cover
                raise ValueError(f"unknown schedule op {kind!r}")
    return results


def complete_aggregation(adj: SampledAdjacency, results: dict,
                         input_cts: list[CipherVec], layout: SlotLayout,
                         hoc: HocReport) -> list[CipherVec]:
    """Weighted-sum completion: add the self term and fold the output streams."""
    groups, blocks = layout.num_groups, layout.blocks
    pos = layout.node_pos
    out = []
    for g in range(groups):
        for b in range(blocks):
            nodes = np.nonzero((pos // layout.n_pad) == b)[0]
            self_mask = np.zeros(layout.slots)
            for lane in range(layout.t):
                self_mask[lane * layout.n_pad + pos[nodes] % layout.n_pad] = \
                    adj.self_weight[nodes]
            acc = pmult(input_cts[g * blocks + b], self_mask, hoc)
            for k in range(adj.n):
                part = results.get((k, b))
                if part is not None and part[g] is not None:
                    acc = add(acc, part[g], hoc)
            out.append(acc)
    return out


def aggregate_spintra(adj: SampledAdjacency, input_cts: list[CipherVec],
                      layout: SlotLayout, hoc: HocReport,
                      opts: SpintraOpts | None = None,
                      schedule: RotationSchedule | None = None) -> list[CipherVec]:
    """Plan (or reuse) a schedule, execute it, and complete the aggregation."""
    if schedule is None:
        schedule = plan_spintra(adj, layout, opts)
    results = exec_spintra(schedule, input_cts, hoc,
                           fold_weights=schedule.opts.fold_weights)
    return complete_aggregation(adj, results, input_cts, layout, hoc)


def dump_schedule(schedule: RotationSchedule) -> str:
    """Line-oriented trace: ``bit=<m> ct=<id> op=<Rot|PMult|Add|Deliver> arg=...``."""
    lines = []

    def line(bit, ct, op, arg):
        lines.append(f"bit={bit} ct={ct} op={op} arg={arg}")

    seen_results: set = set()
    for op in schedule.ops:
        kind = op[0]
        if kind in ("rot", "rot_full"):
            line(op[1], op[2], "Rot", op[3])
        elif kind == "recombine":
            _, bit, cid, stay_mid, moves = op
            if stay_mid is not None:
                line(bit, cid, "PMult", f"m{stay_mid}")
            for _gd, mid in moves:
                line(bit, cid, "PMult", f"m{mid}")
            products = (1 if stay_mid is not None else 0) + len(moves)
            for _ in range(products - 1):
                line(bit, cid, "Add", "-")
        elif kind == "evict":
            _, bit, src, _gd, mid, dst, is_new = op
            line(bit, src, "PMult", f"m{mid}")
            if not is_new:
                line(bit, dst, "Add", f"m{mid}")
        elif kind == "deliver":
            _, bit, cid, k, blk, mid = op
            line(bit, cid, "PMult", f"m{mid}")
            if (k, blk) in seen_results:
                line(bit, cid, "Add", "-")
            seen_results.add((k, blk))
            line(bit, cid, "Deliver", k)
        elif kind == "union":
            _, bit, dst, src = op
            line(bit, dst, "Add", f"ct{src}")
    return "\n".join(lines) + "\n"
