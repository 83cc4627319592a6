"""Exact-arithmetic SIMD slot VM with level tracking and operation accounting.

Ciphertexts are simulated as plain float64 slot vectors: no polynomial rings,
no noise, no keys.  The VM exists to execute and bill rotation schedules, so
every operation records itself into an explicit :class:`HocReport`
accumulator and the slot values stay bit-exact mirrors of the same arithmetic
on raw arrays.

Two flavors of plaintext multiplication are exposed:

* :func:`pmult` — general plaintext vector multiply; consumes one
  multiplication level (rescale folded in).
* :func:`mask` — 0/1 selection mask encoded at unit scale; level-preserving.
  It is still counted as a PMult in the operation tally.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

ROT = "Rot"
PMULT = "PMult"
CMULT = "CMult"
ADD = "Add"
OP_KINDS = (ROT, PMULT, CMULT, ADD)


class LevelExhausted(RuntimeError):
    """Raised when a multiplication is attempted at level 0."""


@dataclass(frozen=True)
class CipherVec:
    """Simulated ciphertext: S slots, remaining level, and live-slot bitmap.

    Values are immutable by convention; operations return fresh instances.
    """

    slots: np.ndarray
    level: int
    occupancy: np.ndarray

    def __post_init__(self):
        s = len(self.slots)
        if s & (s - 1):
            raise ValueError(f"slot count must be a power of two, got {s}")
        if self.level < 0:
            raise ValueError("level must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.slots)

    def density(self) -> float:
        return float(np.count_nonzero(self.occupancy)) / self.size


def make_cipher(values, level: int, occupancy=None) -> CipherVec:
    slots = np.asarray(values, dtype=np.float64).copy()
    if occupancy is None:
        occ = slots != 0.0
    else:
        occ = np.asarray(occupancy, dtype=bool).copy()
    return CipherVec(slots=slots, level=level, occupancy=occ)


def zeros(size: int, level: int) -> CipherVec:
    return CipherVec(slots=np.zeros(size), level=level,
                     occupancy=np.zeros(size, dtype=bool))


@dataclass
class CostModel:
    """Per-operation latency table in PMult-normalized time units.

    Defaults follow the usual leveled-CKKS ordering: rotations and
    ciphertext-ciphertext multiplies around 20x the cost of plaintext
    multiplies and additions.  ``level_factor`` optionally scales cost
    linearly with the remaining level (higher level = more residue limbs =
    slower); flat by default.  ``unit_seconds`` converts accumulated units
    into wall-clock-equivalent seconds for overhead-ratio reporting only; the
    default is calibrated against published single-thread SEAL timings of
    comparable workloads (~0.175 ms per PMult-unit).
    """

    rot_cost: float = 20.0
    cmult_cost: float = 20.0
    pmult_cost: float = 1.0
    add_cost: float = 1.0
    level_factor: float = 0.0
    unit_seconds: float = 1.75e-4

    def latency(self, kind: str, level: int) -> float:
        base = {
            ROT: self.rot_cost,
            CMULT: self.cmult_cost,
            PMULT: self.pmult_cost,
            ADD: self.add_cost,
        }[kind]
        return base * (1.0 + self.level_factor * level)

    @property
    def rot_weight(self) -> float:
        """Rot/PMult cost ratio used by planners."""
        return self.rot_cost / self.pmult_cost


@dataclass
class HocReport:
    """Homomorphic operation counts, by kind and level, plus model latency.

    A scope stack provides per-layer/per-stage breakdowns; ops recorded while
    a scope is active are tallied both globally and under that scope.
    """

    cost_model: CostModel = field(default_factory=CostModel)
    by_level: dict = field(default_factory=dict)  # (kind, level) -> count
    latency: float = 0.0
    sections: dict = field(default_factory=dict)  # label -> {"counts": {...}, "latency": float}
    _scope_stack: list = field(default_factory=list)

    def record(self, kind: str, level: int, times: int = 1):
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        key = (kind, level)
        self.by_level[key] = self.by_level.get(key, 0) + times
        cost = self.cost_model.latency(kind, level) * times
        self.latency += cost
        for label in self._scope_stack:
            sec = self.sections.setdefault(label, {"counts": {}, "latency": 0.0})
            sec["counts"][kind] = sec["counts"].get(kind, 0) + times
            sec["latency"] += cost

    @contextmanager
    def scoped(self, label: str):
        self._scope_stack.append(label)
        try:
            yield self
        finally:
            self._scope_stack.pop()

    @property
    def scope(self) -> str:
        return self._scope_stack[-1] if self._scope_stack else "<top>"

    def count(self, kind: str) -> int:
        return sum(v for (k, _), v in self.by_level.items() if k == kind)

    def counts(self) -> dict:
        return {kind: self.count(kind) for kind in OP_KINDS}

    def section_counts(self, label: str) -> dict:
        sec = self.sections.get(label, {"counts": {}})
        return {kind: sec["counts"].get(kind, 0) for kind in OP_KINDS}

    def recompute_latency(self) -> float:
        """Latency from the (kind, level) histogram alone; equals .latency."""
        return sum(self.cost_model.latency(k, lv) * n
                   for (k, lv), n in self.by_level.items())

    def merge(self, other: "HocReport"):
        for key, n in other.by_level.items():
            self.by_level[key] = self.by_level.get(key, 0) + n
        self.latency += other.latency
        for label, sec in other.sections.items():
            mine = self.sections.setdefault(label, {"counts": {}, "latency": 0.0})
            for k, n in sec["counts"].items():
                mine["counts"][k] = mine["counts"].get(k, 0) + n
            mine["latency"] += sec["latency"]


def rot(c: CipherVec, k: int, hoc: HocReport | None = None) -> CipherVec:
    """Cyclic left rotation by k slots: result[i] = input[(i + k) mod S].

    k = 0 is the identity and costs nothing.
    """
    if not 0 <= k < c.size:
        raise ValueError(f"rotation step {k} out of range [0, {c.size})")
    if k == 0:
        return c
    if hoc is not None:
        hoc.record(ROT, c.level)
    return CipherVec(slots=np.roll(c.slots, -k), level=c.level,
                     occupancy=np.roll(c.occupancy, -k))


def _plain_vector(m, size: int) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ValueError(f"plaintext operand shape {arr.shape} != ({size},)")
    return arr


def pmult(c: CipherVec, m, hoc: HocReport | None = None) -> CipherVec:
    """Plaintext-ciphertext multiply; consumes one level (rescale folded in)."""
    arr = _plain_vector(m, c.size)
    if c.level < 1:
        scope = hoc.scope if hoc is not None else "<top>"
        raise LevelExhausted(f"pmult at level 0 in {scope}: level budget exceeded")
    if hoc is not None:
        hoc.record(PMULT, c.level)
    return CipherVec(slots=c.slots * arr, level=c.level - 1,
                     occupancy=c.occupancy & (arr != 0.0))


def mask(c: CipherVec, m, hoc: HocReport | None = None) -> CipherVec:
    """0/1 selection mask at unit scale: no rescale, level preserved.

    Counted as a PMult in the tally.
    """
    arr = _plain_vector(m, c.size)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError("mask entries must be 0 or 1; use pmult for weights")
    if hoc is not None:
        hoc.record(PMULT, c.level)
    return CipherVec(slots=c.slots * arr, level=c.level,
                     occupancy=c.occupancy & (arr != 0.0))


def add(a: CipherVec, b: CipherVec, hoc: HocReport | None = None) -> CipherVec:
    """Slot-wise sum; result level is the minimum of the operand levels."""
    if a.size != b.size:
        raise ValueError("cannot add ciphertexts of different slot counts")
    level = min(a.level, b.level)
    if hoc is not None:
        hoc.record(ADD, level)
    return CipherVec(slots=a.slots + b.slots, level=level,
                     occupancy=a.occupancy | b.occupancy)


def cmult(a: CipherVec, b: CipherVec, hoc: HocReport | None = None) -> CipherVec:
    """Ciphertext-ciphertext multiply; consumes one level."""
    if a.size != b.size:
        raise ValueError("cannot multiply ciphertexts of different slot counts")
    if a.level < 1 or b.level < 1:
        scope = hoc.scope if hoc is not None else "<top>"
        raise LevelExhausted(f"cmult at level 0 in {scope}: level budget exceeded")
    level = min(a.level, b.level)
    if hoc is not None:
        hoc.record(CMULT, level)
    return CipherVec(slots=a.slots * b.slots, level=level - 1,
                     occupancy=a.occupancy & b.occupancy)


def internal_sum(c: CipherVec, width: int, hoc: HocReport | None = None,
                 stride: int = 1) -> CipherVec:
    """Rotate-and-add reduction over ``width`` elements spaced ``stride`` apart.

    After the call, the first slot of each aligned block holds the block sum.
    Exactly log2(width) rotations and additions are performed.
    """
    if width < 1 or width & (width - 1):
        raise ValueError(f"width must be a positive power of two, got {width}")
    if stride * width > c.size or c.size % (stride * width):
        raise ValueError(f"width {width} x stride {stride} does not divide {c.size}")
    for m in range(int(math.log2(width))):
        c = add(c, rot(c, stride * (1 << m), hoc), hoc)
    return c
