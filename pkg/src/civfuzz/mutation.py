"""Alteration strategy engine.

Decides, at each interface crossing, whether and how to corrupt the data the
malicious side controls.  Strategies are keyed to the semantic type of the
value under alteration; an adaptive crossing threshold shifts effort deeper
into the API once shallow crashes dry up.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .iface import (
    Direction,
    FieldDesc,
    FunctionSig,
    InterfaceSpec,
    Param,
    ParamRole,
    TypeDescriptor,
    TypeKind,
    MAX_AGGREGATE_DEPTH,
)
from .wire import (
    Command,
    CommandKind,
    Event,
    EventKind,
    Locus,
    LocusKind,
    arg,
    callback_arg,
    callback_return,
    return_value,
    shared_byte,
)


class StrategyId(Enum):
    PTR_INVALID = "PtrInvalid"
    PTR_ZERO_PAGE = "PtrZeroPage"
    PTR_REPLAY_SAME_TYPE = "PtrReplaySameType"
    PTR_REPLACE_DIFF_TYPE = "PtrReplaceDiffType"
    PTR_OFFSET_SHIFT = "PtrOffsetShift"
    INT_INC_DEC = "IntIncDec"
    INT_LIMIT = "IntLimit"
    INT_RANDOM = "IntRandom"
    BYTE_EDIT_AT_OFFSET = "ByteEditAtOffset"
    SKIP_CALL = "SkipCall"
    LOCK_SCRAMBLE = "LockScramble"


POINTER_STRATEGIES = (
    StrategyId.PTR_ZERO_PAGE,
    StrategyId.PTR_INVALID,
    StrategyId.PTR_OFFSET_SHIFT,
    StrategyId.PTR_REPLAY_SAME_TYPE,
    StrategyId.PTR_REPLACE_DIFF_TYPE,
)
INTEGER_STRATEGIES = (StrategyId.INT_INC_DEC, StrategyId.INT_LIMIT, StrategyId.INT_RANDOM)

# total by construction: every kind has at least one legal strategy
LEGAL_STRATEGIES: dict[TypeKind, tuple[StrategyId, ...]] = {
    TypeKind.ADDRESS: POINTER_STRATEGIES,
    TypeKind.CALLABLE: POINTER_STRATEGIES,
    TypeKind.INTEGER: INTEGER_STRATEGIES,
    TypeKind.FLOAT: (StrategyId.BYTE_EDIT_AT_OFFSET,),
    TypeKind.AGGREGATE: (StrategyId.BYTE_EDIT_AT_OFFSET,),
    TypeKind.TEXT: (StrategyId.BYTE_EDIT_AT_OFFSET,),
    TypeKind.RAW: (StrategyId.BYTE_EDIT_AT_OFFSET,),
    TypeKind.LOCK: (StrategyId.LOCK_SCRAMBLE,),
}


def strategy_legal_for(strategy: StrategyId, kind: TypeKind) -> bool:
    if strategy is StrategyId.SKIP_CALL:
        return True
    return strategy in LEGAL_STRATEGIES[kind]


@dataclass(frozen=True)
class AlterationRecord:
    """One data-altering action at one crossing; the replayable audit unit."""

    crossing_index: int
    locus: Locus
    strategy_id: StrategyId
    old_bytes: bytes
    new_bytes: bytes
    target_type_name: str
    param_role: ParamRole = ParamRole.OTHER

    @property
    def is_skip(self) -> bool:
        return self.strategy_id is StrategyId.SKIP_CALL

    def to_json(self) -> dict:
        return {
            "crossing_index": self.crossing_index,
            "locus": {
                "kind": self.locus.kind.name,
                "index": self.locus.index,
                "region": self.locus.region,
                "offset": self.locus.offset,
            },
            "strategy": self.strategy_id.value,
            "old": self.old_bytes.hex(),
            "new": self.new_bytes.hex(),
            "type_name": self.target_type_name,
            "role": self.param_role.value,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AlterationRecord":
        loc = doc["locus"]
        return cls(
            crossing_index=doc["crossing_index"],
            locus=Locus(LocusKind[loc["kind"]], loc["index"], loc["region"], loc["offset"]),
            strategy_id=StrategyId(doc["strategy"]),
            old_bytes=bytes.fromhex(doc["old"]),
            new_bytes=bytes.fromhex(doc["new"]),
            target_type_name=doc["type_name"],
            param_role=ParamRole(doc["role"]),
        )


@dataclass
class MutationConfig:
    p_hot: float = 1.0
    p_cold: float = 0.1
    patience: int = 20
    step: Optional[int] = None          # None: mean crossings of the last window
    max_loci_per_crossing: int = 4
    locus_geometric_p: float = 0.5
    skip_call_probability: float = 0.08
    reuse_probability: float = 0.25     # corpus replay inside pointer strategies
    mutation_probability: float = 0.25
    corpus_cap: int = 256
    nonviable_avoidance: float = 0.9
    zero_page_size: int = 4096
    initial_threshold: int = 0
    adapt_threshold: bool = True

    def knobs(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ThresholdState:
    """Crossing-count threshold; crossings below it are altered rarely."""

    threshold: int = 0
    runs_since_new_crash: int = 0
    step: Optional[int] = None
    max_crossing_seen: int = 0
    window: deque = field(default_factory=lambda: deque(maxlen=32))
    saturated: bool = False


@dataclass
class RunStats:
    new_unique_crashes: int
    crossings: int


def decide_alter(
    crossing_index: int, state: ThresholdState, rng: random.Random, config: MutationConfig
) -> bool:
    p = config.p_hot if crossing_index >= state.threshold else config.p_cold
    if p >= 1.0:
        return True
    if p <= 0.0:
        return False
    return rng.random() < p


def update_threshold(
    state: ThresholdState, stats: RunStats, config: MutationConfig
) -> ThresholdState:
    """End-of-run bookkeeping: raise the threshold when crashes run dry."""
    state.max_crossing_seen = max(state.max_crossing_seen, stats.crossings)
    state.window.append(stats.crossings)
    if stats.new_unique_crashes > 0:
        state.runs_since_new_crash = 0
        return state
    state.runs_since_new_crash += 1
    if config.adapt_threshold and state.runs_since_new_crash >= config.patience:
        step = config.step
        if step is None:
            step = max(1, round(sum(state.window) / len(state.window)))
        state.threshold += step
        state.runs_since_new_crash = 0
    state.saturated = state.threshold > 2 * state.max_crossing_seen
    return state


# ---------------------------------------------------------------------------
# alteration corpus


_ABSENT = None


class Corpus:
    """Per-type pools of previously observed and previously injected values."""

    def __init__(self, cap: int = 256):
        self.cap = cap
        self._pools: dict[str, deque[tuple[bytes, str]]] = {}

    def observe(self, type_name: str, value: bytes, provenance: str = "observed") -> None:
        pool = self._pools.setdefault(type_name, deque(maxlen=self.cap))
        pool.append((value, provenance))

    def observe_event(self, event: Event, types: list[Optional[str]]) -> None:
        for (locus, raw), tname in zip(event.values, types):
            if tname:
                self.observe(tname, raw)

    def sample(
        self, type_name: str, rng: random.Random, mutation_probability: float = 0.0
    ) -> Optional[bytes]:
        pool = self._pools.get(type_name)
        if not pool:
            return _ABSENT
        value = pool[rng.randrange(len(pool))][0]
        if mutation_probability > 0 and value and rng.random() < mutation_probability:
            off = rng.randrange(len(value))
            edited = bytearray(value)
            edited[off] = (edited[off] + 1) & 0xFF
            value = bytes(edited)
        return value

    def sample_other(self, type_name: str, rng: random.Random) -> Optional[bytes]:
        names = sorted(n for n, p in self._pools.items() if n != type_name and p)
        if not names:
            return _ABSENT
        return self.sample(names[rng.randrange(len(names))], rng)

    def pool(self, type_name: str) -> list[bytes]:
        return [v for v, _ in self._pools.get(type_name, ())]

    def dump(self) -> str:
        doc = {
            name: [[v.hex(), prov] for v, prov in pool] for name, pool in self._pools.items()
        }
        return json.dumps({"cap": self.cap, "pools": doc}, sort_keys=True)

    @classmethod
    def load(cls, raw: str) -> "Corpus":
        doc = json.loads(raw)
        corpus = cls(cap=doc["cap"])
        for name, entries in doc["pools"].items():
            for v, prov in entries:
                corpus.observe(name, bytes.fromhex(v), prov)
        return corpus


# ---------------------------------------------------------------------------
# loci


MAX_SHARED_ENUM = 4096


def alterable_loci(event: Event, direction: Direction) -> list[Locus]:
    """The full attack surface of one crossing for one trust direction.

    Sandbox (malicious callee): return values at call exit, callback
    arguments at callback entry.  Safebox (malicious caller): call arguments
    at entry, callback return values at callback exit.  Shared bytes are
    fair game in both directions at every crossing.
    """
    out: list[Locus] = []
    if direction is Direction.SANDBOX:
        if event.kind is EventKind.CALL_EXIT:
            out.extend(l for l, _ in event.values if l.kind is LocusKind.RETURN_VALUE)
        elif event.kind is EventKind.CALLBACK_ENTRY:
            out.extend(l for l, _ in event.values if l.kind is LocusKind.CALLBACK_ARG)
    else:
        if event.kind is EventKind.CALL_ENTRY:
            out.extend(l for l, _ in event.values if l.kind is LocusKind.ARG)
        elif event.kind is EventKind.CALLBACK_EXIT:
            out.extend(l for l, _ in event.values if l.kind is LocusKind.CALLBACK_RETURN)
    for rid, raw in event.snapshots:
        for off in range(min(len(raw), MAX_SHARED_ENUM)):
            out.append(shared_byte(rid, off))
    return out


@dataclass(frozen=True)
class CandidateSlot:
    """One alterable value: a locus plus the type that governs strategy choice."""

    locus: Locus
    desc: TypeDescriptor
    old_bytes: bytes
    role: ParamRole = ParamRole.OTHER
    # SharedByte slots: offset of this slot within its region
    region_offset: int = 0


def _flatten_fields(
    desc: TypeDescriptor, base_off: int, depth: int
) -> list[tuple[int, FieldDesc]]:
    out: list[tuple[int, FieldDesc]] = []
    for f in desc.fields:
        if f.desc.kind is TypeKind.AGGREGATE and depth < MAX_AGGREGATE_DEPTH:
            out.extend(_flatten_fields(f.desc, base_off + f.byte_offset, depth + 1))
        else:
            out.append((base_off + f.byte_offset, f))
    return out


def candidate_slots(
    event: Event,
    direction: Direction,
    sig: Optional[FunctionSig],
    regions: dict[int, tuple[int, TypeDescriptor, Optional[int]]],
    word_bits: int,
) -> list[CandidateSlot]:
    """Structured view of the crossing's attack surface.

    Value loci carry their declared descriptors; shared regions decompose
    into typed field slots so pointer and integer strategies can aim at the
    right bytes.  Every slot's locus is legal per alterable_loci.
    """
    slots: list[CandidateSlot] = []
    word_desc = TypeDescriptor(TypeKind.RAW, word_bits, "raw_word")

    for locus, raw in event.values:
        legal = (
            direction is Direction.SANDBOX
            and (
                (event.kind is EventKind.CALL_EXIT and locus.kind is LocusKind.RETURN_VALUE)
                or (event.kind is EventKind.CALLBACK_ENTRY and locus.kind is LocusKind.CALLBACK_ARG)
            )
        ) or (
            direction is Direction.SAFEBOX
            and (
                (event.kind is EventKind.CALL_ENTRY and locus.kind is LocusKind.ARG)
                or (event.kind is EventKind.CALLBACK_EXIT and locus.kind is LocusKind.CALLBACK_RETURN)
            )
        )
        if not legal:
            continue
        desc: TypeDescriptor
        role = ParamRole.OTHER
        if sig is None:
            desc = word_desc
        elif locus.kind in (LocusKind.ARG, LocusKind.CALLBACK_ARG):
            if locus.index < len(sig.params):
                p = sig.params[locus.index]
                desc, role = p.desc, p.role
            else:
                # undeclared parameter of a low-confidence callback
                desc = word_desc
        else:
            desc = sig.return_type if sig.return_type is not None else word_desc
        slots.append(CandidateSlot(locus, desc, raw, role))

    for rid, raw in event.snapshots:
        if rid not in regions:
            continue
        _, element, _ = regions[rid]
        if element.kind is TypeKind.AGGREGATE:
            for off, f in _flatten_fields(element, 0, 0):
                end = off + f.desc.size_bytes
                if end > len(raw):
                    continue
                slots.append(
                    CandidateSlot(
                        shared_byte(rid, off), f.desc, raw[off:end], f.role, region_offset=off
                    )
                )
        elif len(raw) > 0:
            slots.append(CandidateSlot(shared_byte(rid, 0), element, raw, ParamRole.OTHER))
    return slots


# ---------------------------------------------------------------------------
# strategy application


def _le(value: int, size: int) -> bytes:
    return (value % (1 << (8 * size))).to_bytes(size, "little")


def _int_limits(bits: int) -> list[int]:
    return [0, (1 << (bits - 1)) - 1, 1 << (bits - 1), (1 << bits) - 1]


class MutationEngine:
    """Per-campaign alteration state: corpus, threshold, non-viable patterns."""

    def __init__(self, spec: InterfaceSpec, config: Optional[MutationConfig] = None):
        self.spec = spec
        self.config = config or MutationConfig()
        self.corpus = Corpus(cap=self.config.corpus_cap)
        self.threshold = ThresholdState(threshold=self.config.initial_threshold)
        self.nonviable: set[tuple] = set()
        self._skip_only_run = False
        hint = spec.hint("unmapped_probe")
        if hint is not None:
            self._unmapped_base, self._unmapped_len = hint.base, hint.length
        else:
            self._unmapped_base = 0xDEAD0000 if spec.word_size_bits <= 32 else 0xDEAD_0000_0000
            self._unmapped_len = 4096
        zp = spec.hint("zero_page")
        self._zero_page = zp.length if zp is not None else self.config.zero_page_size

    # -- per-crossing entry points ---------------------------------------

    def begin_run(self) -> None:
        self._skip_only_run = False

    def decide(self, crossing_index: int, rng: random.Random) -> bool:
        return decide_alter(crossing_index, self.threshold, rng, self.config)

    def end_run(self, stats: RunStats) -> None:
        update_threshold(self.threshold, stats, self.config)

    def mark_nonviable(self, records: list[AlterationRecord]) -> None:
        for r in records:
            self.nonviable.add(self._pattern(r.locus, r.strategy_id, r.target_type_name))

    @staticmethod
    def _pattern(locus: Locus, strategy: StrategyId, type_name: str) -> tuple:
        anchor = locus.offset if locus.kind is LocusKind.SHARED_BYTE else locus.index
        return (locus.kind.name, anchor, strategy.value, type_name)

    def propose(
        self,
        event: Event,
        sig: Optional[FunctionSig],
        regions: dict[int, tuple[int, TypeDescriptor, Optional[int]]],
        rng: random.Random,
    ) -> tuple[Command, list[AlterationRecord]]:
        """Build the command for one crossing the engine decided to alter."""
        if self._skip_only_run:
            # a non-execution probe owns the whole run so the skip stays the
            # only entry in the alteration log
            return Command(CommandKind.PROCEED), []
        if (
            event.kind is EventKind.CALL_ENTRY
            and rng.random() < self.config.skip_call_probability
        ):
            self._skip_only_run = True
            synth = self._synthetic_return(sig, rng)
            record = AlterationRecord(
                crossing_index=event.crossing_index,
                locus=return_value(),
                strategy_id=StrategyId.SKIP_CALL,
                old_bytes=b"",
                new_bytes=synth,
                target_type_name=sig.return_type.type_name if sig and sig.return_type else "void",
            )
            return Command(CommandKind.SKIP_CALL, synthetic_return=synth), [record]

        slots = candidate_slots(event, self.spec.direction, sig, regions, self.spec.word_size_bits)
        if not slots:
            return Command(CommandKind.PROCEED), []

        count = 1
        while count < self.config.max_loci_per_crossing and rng.random() < self.config.locus_geometric_p:
            count += 1
        count = min(count, len(slots))
        chosen = rng.sample(slots, count)

        records: list[AlterationRecord] = []
        for slot in chosen:
            produced = self._apply_slot(event, slot, rng)
            if produced is not None:
                records.append(produced)
        if not records:
            return Command(CommandKind.PROCEED), []
        for r in records:
            self.corpus.observe(r.target_type_name, r.new_bytes, provenance="injected")
        directives = tuple((r.locus, r.new_bytes) for r in records)
        return Command(CommandKind.ALTER, directives=directives), records

    # -- internals --------------------------------------------------------

    def _apply_slot(
        self, event: Event, slot: CandidateSlot, rng: random.Random
    ) -> Optional[AlterationRecord]:
        legal = LEGAL_STRATEGIES[slot.desc.kind]
        if slot.desc.kind in (TypeKind.ADDRESS, TypeKind.CALLABLE):
            # corpus replay fires with the configured reuse probability
            if rng.random() < self.config.reuse_probability:
                strategy = rng.choice(
                    (StrategyId.PTR_REPLAY_SAME_TYPE, StrategyId.PTR_REPLACE_DIFF_TYPE)
                )
            else:
                strategy = rng.choice(
                    (StrategyId.PTR_ZERO_PAGE, StrategyId.PTR_INVALID, StrategyId.PTR_OFFSET_SHIFT)
                )
        else:
            strategy = legal[rng.randrange(len(legal))]
        if self._pattern(slot.locus, strategy, slot.desc.type_name) in self.nonviable:
            if rng.random() < self.config.nonviable_avoidance:
                return None

        locus = slot.locus
        old = slot.old_bytes
        new: Optional[bytes] = None

        if strategy in POINTER_STRATEGIES:
            strategy, new = self._pointer_bytes(strategy, slot, rng)
        elif strategy in INTEGER_STRATEGIES:
            new = self._integer_bytes(strategy, slot, rng)
        elif strategy is StrategyId.BYTE_EDIT_AT_OFFSET:
            if not old:
                return None
            off = rng.randrange(len(old))
            edited = bytearray(old)
            if rng.random() < 0.5:
                edited[off] = (edited[off] + rng.choice((1, 0xFF))) & 0xFF
            else:
                edited[off] = rng.randrange(256)
            if locus.kind is LocusKind.SHARED_BYTE:
                # narrow the directive to the single edited byte
                locus = shared_byte(locus.region, slot.region_offset + off)
                old, new = bytes(slot.old_bytes[off : off + 1]), bytes(edited[off : off + 1])
            else:
                new = bytes(edited)
        elif strategy is StrategyId.LOCK_SCRAMBLE:
            size = len(old) or slot.desc.size_bytes
            scrambled = bytes(rng.randrange(256) for _ in range(size))
            if scrambled == old:
                scrambled = bytes((scrambled[0] ^ 0xFF,)) + scrambled[1:]
            new = scrambled
        if new is None or new == old:
            return None
        return AlterationRecord(
            crossing_index=event.crossing_index,
            locus=locus,
            strategy_id=strategy,
            old_bytes=old,
            new_bytes=new,
            target_type_name=slot.desc.type_name,
            param_role=slot.role,
        )

    def _pointer_bytes(
        self, strategy: StrategyId, slot: CandidateSlot, rng: random.Random
    ) -> tuple[StrategyId, bytes]:
        size = slot.desc.size_bytes
        old_addr = int.from_bytes(slot.old_bytes, "little") if slot.old_bytes else 0
        if strategy is StrategyId.PTR_REPLAY_SAME_TYPE:
            value = self.corpus.sample(slot.desc.type_name, rng, self.config.mutation_probability)
            if value is not None and len(value) == size:
                return strategy, value
            strategy = StrategyId.PTR_INVALID
        if strategy is StrategyId.PTR_REPLACE_DIFF_TYPE:
            value = self.corpus.sample_other(slot.desc.type_name, rng)
            if value is not None:
                return strategy, _le(int.from_bytes(value, "little"), size)
            strategy = StrategyId.PTR_INVALID
        if strategy is StrategyId.PTR_ZERO_PAGE:
            return strategy, _le(rng.randrange(0, self._zero_page // 8) * 8, size)
        if strategy is StrategyId.PTR_OFFSET_SHIFT:
            delta = rng.choice((8, 16, 64, 256, 4096)) * rng.choice((1, -1))
            return strategy, _le(old_addr + delta, size)
        # PTR_INVALID
        span = max(1, min(16, self._unmapped_len // 8))
        return StrategyId.PTR_INVALID, _le(self._unmapped_base + 8 * rng.randrange(span), size)

    def _integer_bytes(
        self, strategy: StrategyId, slot: CandidateSlot, rng: random.Random
    ) -> bytes:
        bits = slot.desc.size_bits
        size = slot.desc.size_bytes
        old = int.from_bytes(slot.old_bytes, "little") if slot.old_bytes else 0
        if strategy is StrategyId.INT_INC_DEC:
            delta = 1 << rng.randrange(bits)
            if rng.random() < 0.5:
                delta = -delta
            return _le(old + delta, size)
        if strategy is StrategyId.INT_LIMIT:
            limits = _int_limits(bits)
            value = limits[rng.randrange(len(limits))]
            if bits > 32 and rng.random() < 0.25:
                # place a 32-bit limit at a byte offset inside the wider value
                sub = _int_limits(32)[rng.randrange(4)]
                off = rng.randrange(size - 3)
                buf = bytearray(_le(old, size))
                buf[off : off + 4] = _le(sub, 4)
                return bytes(buf)
            return _le(value, size)
        return _le(rng.getrandbits(bits), size)

    def _synthetic_return(self, sig: Optional[FunctionSig], rng: random.Random) -> bytes:
        if sig is None or sig.return_type is None:
            return b""
        ret = sig.return_type
        fake = CandidateSlot(return_value(), ret, b"\x00" * ret.size_bytes)
        strategy = INTEGER_STRATEGIES[rng.randrange(len(INTEGER_STRATEGIES))]
        width_desc = replace(
            ret, kind=TypeKind.INTEGER, pointee=None, fields=(), sig_params=(), sig_return=None
        )
        return self._integer_bytes(
            strategy, CandidateSlot(return_value(), width_desc, fake.old_bytes), rng
        )


def propose_alterations(
    event: Event,
    spec: InterfaceSpec,
    direction: Direction,
    rng: random.Random,
    corpus: Corpus,
    sig: Optional[FunctionSig] = None,
    regions: Optional[dict] = None,
    config: Optional[MutationConfig] = None,
) -> list[AlterationRecord]:
    """Functional wrapper over the engine for one-shot proposals."""
    if direction is not spec.direction:
        spec = replace(spec, direction=direction)
    engine = MutationEngine(spec, config)
    engine.corpus = corpus
    _, records = engine.propose(event, sig, regions or {}, rng)
    return records
