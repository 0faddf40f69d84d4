"""Crash processing: dedup, triage, reproduction, minimization, classification.

Raw detector reports enter; unique, reproduced, minimized, classified
findings leave.  Every stage replays against a fresh adapter session using
only the recorded alteration log, so results are independent of the engine
state that produced the crash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

from .errors import ReplayDivergence, UnattributableStack
from .iface import InterfaceSpec, ParamRole, Role
from .mutation import AlterationRecord, StrategyId
from .wire import (
    AccessKind,
    Command,
    CommandKind,
    Event,
    EventKind,
    LocusKind,
    PROCEED,
    StackFrame,
    TERMINATE,
)

ARBITRARY = "Arbitrary"
FIXED = "Fixed"
INCONCLUSIVE = "Inconclusive"

PROBE_DELTAS = (8, 64, 4096)

IMPACT_NAMES = {
    AccessKind.READ: "Read",
    AccessKind.WRITE: "Write",
    AccessKind.EXEC: "Exec",
    AccessKind.ALLOC_MISUSE: "Alloc",
    AccessKind.NULL_DEREF: "Null",
    AccessKind.DEADLOCK: "Deadlock",
}


def dedup_key(
    frames: tuple[StackFrame, ...], access_kind: AccessKind, top_k: Optional[int] = None
) -> str:
    """Stable identity of a crash: normalized stack plus access kind.

    Addresses never participate, only symbol+offset pairs, so runs with
    different corrupted values bucket together.  The full stack is hashed by
    default; hashing only the top_k frames merges crashes that share a
    helper frame, which is sometimes wanted and sometimes not, so it is a
    knob rather than the default.
    """
    if top_k is not None:
        frames = frames[:top_k]
    material = "|".join(f"{f.label}+{f.offset}" for f in frames) + "#" + access_kind.name
    return hashlib.sha256(material.encode()).hexdigest()[:16]


@dataclass
class MinimizedSet:
    sufficient: list[AlterationRecord]
    necessary: list[AlterationRecord]
    superfluous: list[AlterationRecord]

    @property
    def core(self) -> list[AlterationRecord]:
        return self.sufficient + self.necessary

    def to_json(self) -> dict:
        return {
            "sufficient": [r.to_json() for r in self.sufficient],
            "necessary": [r.to_json() for r in self.necessary],
            "superfluous": [r.to_json() for r in self.superfluous],
        }


@dataclass
class CrashRecord:
    crash_id: str
    frames: tuple[StackFrame, ...]
    access_kind: AccessKind
    faulty_address: Optional[int]
    alteration_log: list[AlterationRecord]
    run_index: int
    run_seed: str
    crossing_index: int
    occurrences: int = 1
    disposition: str = "valid"  # valid | fp | unattributable
    victim_component: Optional[str] = None
    reproduced: Optional[bool] = None
    minimized: Optional[MinimizedSet] = None
    minimization_verified: bool = False
    replay_divergence: bool = False
    arbitrary: Optional[str] = None
    civ_classes: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        """Stable on-disk record schema (the crash bundle contract).

        Field names are frozen: crash_id, frames[{label,offset}], access_kind,
        impact, faulty_address, alteration_log, run_index, run_seed,
        crossing_index, occurrences, disposition, victim_component,
        reproduced, minimized{sufficient,necessary,superfluous},
        minimization_verified, replay_divergence, arbitrary, civ_classes.
        """
        return {
            "crash_id": self.crash_id,
            "frames": [{"label": f.label, "offset": f.offset} for f in self.frames],
            "access_kind": self.access_kind.name,
            "impact": IMPACT_NAMES[self.access_kind],
            "faulty_address": self.faulty_address,
            "alteration_log": [r.to_json() for r in self.alteration_log],
            "run_index": self.run_index,
            "run_seed": self.run_seed,
            "crossing_index": self.crossing_index,
            "occurrences": self.occurrences,
            "disposition": self.disposition,
            "victim_component": self.victim_component,
            "reproduced": self.reproduced,
            "minimized": self.minimized.to_json() if self.minimized else None,
            "minimization_verified": self.minimization_verified,
            "replay_divergence": self.replay_divergence,
            "arbitrary": self.arbitrary,
            "civ_classes": sorted(self.civ_classes),
        }


def build_crash_record(
    event: Event,
    log: list[AlterationRecord],
    run_index: int,
    run_seed: str,
    dedup_top_k: Optional[int] = None,
) -> CrashRecord:
    crash = event.crash
    assert crash is not None
    return CrashRecord(
        crash_id=dedup_key(crash.frames, crash.access_kind, dedup_top_k),
        frames=crash.frames,
        access_kind=crash.access_kind,
        faulty_address=crash.faulty_address,
        alteration_log=list(log),
        run_index=run_index,
        run_seed=run_seed,
        crossing_index=event.crossing_index,
    )


class CrashDatabase:
    """Known-crash store keyed by dedup identity; append-only on disk."""

    def __init__(self, jsonl_path=None):
        self.records: dict[str, CrashRecord] = {}
        self._jsonl_path = jsonl_path

    def dedup(self, crash: CrashRecord) -> tuple[str, CrashRecord]:
        """Returns ("new", crash) or ("duplicate", existing)."""
        existing = self.records.get(crash.crash_id)
        if existing is not None:
            existing.occurrences += 1
            return "duplicate", existing
        self.records[crash.crash_id] = crash
        return "new", crash

    def persist(self, crash: CrashRecord) -> None:
        if self._jsonl_path is not None:
            with open(self._jsonl_path, "a") as fh:
                fh.write(json.dumps(crash.to_json(), sort_keys=True) + "\n")

    def unique(self, disposition: Optional[str] = None) -> list[CrashRecord]:
        out = sorted(self.records.values(), key=lambda r: r.crash_id)
        if disposition is None:
            return out
        return [r for r in out if r.disposition == disposition]


def is_false_positive(crash: CrashRecord, spec: InterfaceSpec) -> bool:
    """Walk the stack top-down to the first component-attributed frame; the
    crash is invalid when that component is the malicious one (the attacker
    corrupted itself)."""
    for frame in crash.frames:
        component = spec.component_for_label(frame.label)
        if component is not None:
            crash.victim_component = component.name
            return component.role is Role.MALICIOUS
    raise UnattributableStack(
        f"no frame of {crash.crash_id} matches any component label"
    )


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplayResult:
    crash_id: str
    frames: tuple[StackFrame, ...]
    access_kind: AccessKind
    faulty_address: Optional[int]


class AdapterFactory(Protocol):
    def launch(self, run_id: int, run_seed: str): ...


class Replayer:
    """Re-runs one target run sending a fixed alteration schedule.

    Directives whose loci no longer exist in the diverged event stream are
    dropped instead of crashing the session; a schedule that stops matching
    simply stops reproducing.
    """

    def __init__(
        self,
        adapter: AdapterFactory,
        max_crossings: int = 10_000,
        dedup_top_k: Optional[int] = None,
    ):
        self._adapter = adapter
        self.max_crossings = max_crossings
        self.dedup_top_k = dedup_top_k
        self.replays = 0

    def run(
        self, run_index: int, run_seed: str, records: list[AlterationRecord]
    ) -> Optional[ReplayResult]:
        self.replays += 1
        schedule: dict[int, list[AlterationRecord]] = {}
        for r in records:
            schedule.setdefault(r.crossing_index, []).append(r)
        session = self._adapter.launch(run_index, run_seed)
        try:
            while True:
                event = session.recv_event()
                if event.kind is EventKind.READY:
                    continue
                if event.kind is EventKind.CRASH_REPORT:
                    session.send_command(TERMINATE)
                    crash = event.crash
                    return ReplayResult(
                        dedup_key(crash.frames, crash.access_kind, self.dedup_top_k),
                        crash.frames,
                        crash.access_kind,
                        crash.faulty_address,
                    )
                if event.kind is EventKind.WORKLOAD_DONE:
                    session.send_command(TERMINATE)
                    return None
                session.send_command(self._command_for(event, schedule.get(event.crossing_index)))
        finally:
            session.close()

    @staticmethod
    def _command_for(event: Event, records: Optional[list[AlterationRecord]]) -> Command:
        if not records:
            return PROCEED
        skip = next((r for r in records if r.is_skip), None)
        if skip is not None:
            if event.kind is EventKind.CALL_ENTRY:
                return Command(CommandKind.SKIP_CALL, synthetic_return=skip.new_bytes)
            return PROCEED
        value_loci = {l for l, _ in event.values}
        snap_len = {rid: len(raw) for rid, raw in event.snapshots}
        directives = []
        for r in records:
            locus = r.locus
            if locus.kind is LocusKind.SHARED_BYTE:
                if snap_len.get(locus.region, 0) >= locus.offset + len(r.new_bytes):
                    directives.append((locus, r.new_bytes))
            elif locus in value_loci:
                directives.append((locus, r.new_bytes))
        if not directives:
            return PROCEED
        return Command(CommandKind.ALTER, directives=tuple(directives))


def reproduce(crash: CrashRecord, replayer: Replayer) -> bool:
    """Replay the full recorded log; true iff the same dedup key crashes."""
    result = replayer.run(crash.run_index, crash.run_seed, crash.alteration_log)
    ok = result is not None and result.crash_id == crash.crash_id
    crash.reproduced = ok
    return ok


def minimize(crash: CrashRecord, replayer: Replayer) -> MinimizedSet:
    """Reverse-order triage of the alteration log.

    Last alterations first: alone-crashing records are sufficient; records
    whose removal stops the crash are necessary; the rest are superfluous.
    The resulting core is verified by one more replay.
    """
    log = crash.alteration_log
    sufficient: list[AlterationRecord] = []
    necessary: list[AlterationRecord] = []
    superfluous: list[AlterationRecord] = []
    for r in reversed(log):
        alone = replayer.run(crash.run_index, crash.run_seed, [r])
        if alone is not None and alone.crash_id == crash.crash_id:
            sufficient.append(r)
            continue
        without = [x for x in log if x is not r]
        remainder = replayer.run(crash.run_index, crash.run_seed, without)
        if remainder is None or remainder.crash_id != crash.crash_id:
            necessary.append(r)
        else:
            superfluous.append(r)
    minimized = MinimizedSet(
        sufficient=list(reversed(sufficient)),
        necessary=list(reversed(necessary)),
        superfluous=list(reversed(superfluous)),
    )
    verify = replayer.run(crash.run_index, crash.run_seed, minimized.core)
    crash.minimization_verified = verify is not None and verify.crash_id == crash.crash_id
    crash.minimized = minimized
    if not crash.minimization_verified:
        raise ReplayDivergence(
            f"minimized core of {crash.crash_id} no longer reproduces the crash"
        )
    return minimized


def probe_arbitrariness(
    crash: CrashRecord, minimized: MinimizedSet, replayer: Replayer
) -> str:
    """Shift each core alteration value by +-8/64/4096 and watch the faulty
    address: exact tracking means the attacker chooses addresses."""
    if crash.access_kind not in (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC):
        raise ValueError("arbitrariness is only probed for read/write/exec crashes")
    base_addr = crash.faulty_address
    core = minimized.core
    probes = 0
    crashed_same_addr = 0
    exact_shift = False
    for target in core:
        width = len(target.new_bytes)
        if width == 0:
            continue
        value = int.from_bytes(target.new_bytes, "little")
        for delta in PROBE_DELTAS:
            for sign in (1, -1):
                probed = (value + sign * delta) % (1 << (8 * width))
                variant = replace(target, new_bytes=probed.to_bytes(width, "little"))
                schedule = [variant if r is target else r for r in core]
                probes += 1
                result = replayer.run(crash.run_index, crash.run_seed, schedule)
                if result is None or result.frames != crash.frames:
                    continue
                if result.faulty_address == base_addr:
                    crashed_same_addr += 1
                elif (
                    result.faulty_address is not None
                    and base_addr is not None
                    and result.faulty_address - base_addr == sign * delta
                ):
                    exact_shift = True
    if exact_shift:
        label = ARBITRARY
    elif probes > 0 and crashed_same_addr == probes:
        label = FIXED
    else:
        label = INCONCLUSIVE
    crash.arbitrary = label
    return label


def classify_civ(crash: CrashRecord, minimized: MinimizedSet) -> frozenset[str]:
    """Map the strategies of the minimized core onto vulnerability classes."""
    classes: set[str] = set()
    for r in minimized.core:
        s = r.strategy_id
        if s in (
            StrategyId.PTR_INVALID,
            StrategyId.PTR_ZERO_PAGE,
            StrategyId.PTR_REPLAY_SAME_TYPE,
            StrategyId.PTR_REPLACE_DIFF_TYPE,
            StrategyId.PTR_OFFSET_SHIFT,
        ):
            classes.add("DC1")
        elif s in (StrategyId.INT_INC_DEC, StrategyId.INT_LIMIT, StrategyId.INT_RANDOM):
            if r.param_role in (ParamRole.SIZE, ParamRole.INDEX):
                classes.add("DC2")
            else:
                classes.add("DC3")
        elif s is StrategyId.BYTE_EDIT_AT_OFFSET:
            classes.add("DC3")
        elif s is StrategyId.SKIP_CALL:
            classes.add("TV1")
        elif s is StrategyId.LOCK_SCRAMBLE:
            classes.add("TV2")
    crash.civ_classes = frozenset(classes)
    return crash.civ_classes


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PipelineOutcome:
    status: str  # new | duplicate
    record: CrashRecord
    nonviable: list[AlterationRecord] = field(default_factory=list)


class CrashPipeline:
    """Runs every stage over each raw report, in order."""

    def __init__(self, spec: InterfaceSpec, database: CrashDatabase, replayer: Replayer):
        self.spec = spec
        self.database = database
        self.replayer = replayer
        self.unattributable_count = 0
        self.unreproduced_count = 0

    def process(self, raw: CrashRecord) -> PipelineOutcome:
        status, record = self.database.dedup(raw)
        if status == "duplicate":
            return PipelineOutcome(status, record)

        try:
            record.disposition = "fp" if is_false_positive(record, self.spec) else "valid"
        except UnattributableStack:
            record.disposition = "unattributable"
            self.unattributable_count += 1
            self.database.persist(record)
            return PipelineOutcome("new", record)

        if not reproduce(record, self.replayer):
            self.unreproduced_count += 1
            self.database.persist(record)
            return PipelineOutcome("new", record)

        nonviable: list[AlterationRecord] = []
        try:
            minimized = minimize(record, self.replayer)
        except ReplayDivergence:
            record.replay_divergence = True
            self.database.persist(record)
            return PipelineOutcome("new", record)

        classify_civ(record, minimized)
        if record.disposition == "fp":
            # remember the attacker-self-corruption pattern so the engine can
            # steer away from it
            nonviable = list(minimized.core)
        elif record.access_kind in (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC):
            probe_arbitrariness(record, minimized, self.replayer)

        self.database.persist(record)
        return PipelineOutcome("new", record, nonviable)
