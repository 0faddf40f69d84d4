"""Campaign orchestration: spec load, adapter sessions, the alteration loop,
crash handoff, coverage accounting, and stop conditions.

Each run launches a fresh adapter session, drives the workload while serving
crossing events through the mutation engine, and hands any crash report to
the pipeline.  Runs are independent; with the simulated adapter the whole
campaign is a pure function of (scenario, config, seed).
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import (
    AdapterLaunchError,
    CivFuzzError,
    CodecError,
    ConfigError,
    FrameError,
    ProtocolError,
)
from .iface import (
    CallbackRegistry,
    Direction,
    FunctionSig,
    InterfaceSpec,
    RegionTracker,
    Role,
    load_interface_spec,
)
from .mutation import AlterationRecord, MutationConfig, MutationEngine, RunStats
from .pipeline import (
    CrashDatabase,
    CrashPipeline,
    IMPACT_NAMES,
    Replayer,
    build_crash_record,
)
from .wire import CommandKind, Event, EventKind, PROCEED, PROTOCOL_VERSION, TERMINATE

IMPACT_COLUMNS = ("Read", "Write", "Exec", "Alloc", "Null", "Deadlock")


@dataclass
class CampaignConfig:
    spec_path: Optional[Path] = None
    adapter: str = "sim"  # sim | shim
    seed: int = 0
    max_runs: Optional[int] = None
    time_budget: Optional[float] = None
    workload: Optional[str] = None  # shim adapter: command line to exec
    workload_repetitions: int = 1
    direction_override: Optional[Direction] = None
    mutation: MutationConfig = field(default_factory=MutationConfig)
    output_dir: Optional[Path] = None
    corpus_path: Optional[Path] = None  # resume the alteration corpus from here
    dedup_top_k: Optional[int] = None   # None: hash the full stack
    max_crossings_per_run: int = 10_000
    session_timeout: float = 10.0

    def validate(self) -> None:
        if self.max_runs is None and self.time_budget is None:
            raise ConfigError("at most one of max_runs/time_budget may be unbounded")
        if self.adapter not in ("sim", "shim"):
            raise ConfigError(f"unknown adapter kind {self.adapter!r}")
        if self.adapter == "shim" and not self.workload:
            raise ConfigError("the shim adapter needs a workload command")


@dataclass
class CampaignReport:
    scenario: str
    trust_model: str
    api_name: str
    raw_crash_count: int
    dedup_count: int
    victims: int
    callers: int
    coverage_reached: int
    coverage_total: int
    impact: dict[str, tuple[int, int]]  # column -> (count, of which arbitrary)
    fp_count: int
    unattributable_count: int
    unreproduced_count: int
    protocol_error_runs: int
    runs_executed: int
    stop_reason: str
    saturated: bool
    final_threshold: int
    crashes: list[dict]

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "trust_model": self.trust_model,
            "api_name": self.api_name,
            "raw_crash_count": self.raw_crash_count,
            "dedup_count": self.dedup_count,
            "victims": self.victims,
            "callers": self.callers,
            "coverage_reached": self.coverage_reached,
            "coverage_total": self.coverage_total,
            "impact": {k: list(v) for k, v in self.impact.items()},
            "fp_count": self.fp_count,
            "unattributable_count": self.unattributable_count,
            "unreproduced_count": self.unreproduced_count,
            "protocol_error_runs": self.protocol_error_runs,
            "runs_executed": self.runs_executed,
            "stop_reason": self.stop_reason,
            "saturated": self.saturated,
            "final_threshold": self.final_threshold,
            "crashes": self.crashes,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CampaignReport":
        return cls(
            scenario=doc["scenario"],
            trust_model=doc["trust_model"],
            api_name=doc["api_name"],
            raw_crash_count=doc["raw_crash_count"],
            dedup_count=doc["dedup_count"],
            victims=doc["victims"],
            callers=doc["callers"],
            coverage_reached=doc["coverage_reached"],
            coverage_total=doc["coverage_total"],
            impact={k: (v[0], v[1]) for k, v in doc["impact"].items()},
            fp_count=doc["fp_count"],
            unattributable_count=doc["unattributable_count"],
            unreproduced_count=doc["unreproduced_count"],
            protocol_error_runs=doc["protocol_error_runs"],
            runs_executed=doc["runs_executed"],
            stop_reason=doc["stop_reason"],
            saturated=doc["saturated"],
            final_threshold=doc["final_threshold"],
            crashes=doc["crashes"],
        )


def coverage_account(events: list[Event], spec: InterfaceSpec) -> tuple[int, int]:
    """Reached = distinct declared functions with a call entry; callbacks do
    not count toward either side."""
    declared = {f.symbol for f in spec.api_functions}
    reached = {
        e.symbol for e in events if e.kind is EventKind.CALL_ENTRY and e.symbol in declared
    }
    return len(reached), len(declared)


def _value_type_names(event: Event, sig: Optional[FunctionSig]) -> list[Optional[str]]:
    names: list[Optional[str]] = []
    for locus, _ in event.values:
        if sig is None:
            names.append(None)
        elif locus.kind.name in ("ARG", "CALLBACK_ARG"):
            names.append(
                sig.params[locus.index].desc.type_name if locus.index < len(sig.params) else None
            )
        else:
            names.append(sig.return_type.type_name if sig.return_type else None)
    return names


class Campaign:
    def __init__(self, config: CampaignConfig, adapter=None):
        config.validate()
        self.config = config
        self.adapter = adapter if adapter is not None else self._build_adapter()
        spec = self.adapter.spec
        if config.direction_override is not None and config.direction_override is not spec.direction:
            from dataclasses import replace

            spec = replace(spec, direction=config.direction_override)
        self.spec = spec
        self.engine = MutationEngine(spec, config.mutation)
        if config.corpus_path is not None and Path(config.corpus_path).exists():
            from .mutation import Corpus

            self.engine.corpus = Corpus.load(Path(config.corpus_path).read_text())
        self.registry = CallbackRegistry(spec)
        db_path = None
        if config.output_dir is not None:
            config.output_dir.mkdir(parents=True, exist_ok=True)
            db_path = config.output_dir / "database.jsonl"
            db_path.write_text("")
        self.database = CrashDatabase(db_path)
        self.replayer = Replayer(
            self.adapter, config.max_crossings_per_run, config.dedup_top_k
        )
        self.pipeline = CrashPipeline(spec, self.database, self.replayer)
        self.reached_symbols: set[str] = set()
        self.raw_crash_count = 0
        self.protocol_error_runs = 0
        self.runs_executed = 0
        self.stop_reason = "exhausted"

    def _build_adapter(self):
        cfg = self.config
        if cfg.spec_path is None:
            raise ConfigError("spec_path is required")
        if cfg.adapter == "sim":
            from .sim.machine import SimAdapter
            from .sim.scenario import load_scenario

            scenario = load_scenario(cfg.spec_path)
            return SimAdapter(
                scenario, cfg.workload_repetitions, cfg.max_crossings_per_run
            )
        from .shim_adapter import ShimAdapter

        spec = load_interface_spec(Path(cfg.spec_path).read_text())
        if not cfg.workload:
            raise ConfigError("the shim adapter needs a workload command")
        return ShimAdapter(spec, cfg.workload, timeout=cfg.session_timeout)

    # -- main loop -----------------------------------------------------------

    def run(self) -> CampaignReport:
        cfg = self.config
        started = time.monotonic()
        run_index = 0
        while True:
            if cfg.max_runs is not None and run_index >= cfg.max_runs:
                self.stop_reason = "max_runs"
                break
            if cfg.time_budget is not None and time.monotonic() - started >= cfg.time_budget:
                self.stop_reason = "time_budget"
                break
            if self.engine.threshold.saturated:
                self.stop_reason = "saturation"
                break
            self._one_run(run_index)
            run_index += 1
            self.runs_executed = run_index
        return self._build_report()

    def _one_run(self, run_index: int) -> None:
        cfg = self.config
        run_seed = f"{cfg.seed}:{run_index}"
        rng = random.Random(run_seed)
        try:
            session = self.adapter.launch(run_index, run_seed)
        except CivFuzzError:
            raise
        except Exception as e:
            raise AdapterLaunchError(str(e)) from e

        tracker = RegionTracker(self.spec.word_size_bits)
        self.engine.begin_run()
        log: list[AlterationRecord] = []
        crossings = 0
        new_uniques = 0
        try:
            while True:
                event = session.recv_event()
                if event.kind is EventKind.READY:
                    if event.protocol_version != PROTOCOL_VERSION:
                        raise ProtocolError(
                            f"adapter speaks v{event.protocol_version}, "
                            f"monitor v{PROTOCOL_VERSION}"
                        )
                    continue
                if event.kind is EventKind.WORKLOAD_DONE:
                    session.send_command(TERMINATE)
                    break
                if event.kind is EventKind.CRASH_REPORT:
                    session.send_command(TERMINATE)
                    session.close()
                    self.raw_crash_count += 1
                    record = build_crash_record(
                        event, log, run_index, run_seed, self.config.dedup_top_k
                    )
                    outcome = self.pipeline.process(record)
                    if outcome.status == "new":
                        new_uniques += 1
                        if outcome.nonviable:
                            self.engine.mark_nonviable(outcome.nonviable)
                    break
                # crossing event
                crossings = max(crossings, event.crossing_index + 1)
                sig = self._runtime_sig(event)
                if event.kind is EventKind.CALL_ENTRY:
                    self.reached_symbols.add(event.symbol)
                if event.kind in (EventKind.CALL_ENTRY, EventKind.CALLBACK_ENTRY):
                    if sig is not None:
                        values = [raw for _, raw in event.values]
                        snaps = dict(event.snapshots)
                        tracker.push_window(
                            sig.params,
                            values,
                            lambda base, n, rid: snaps.get(rid),
                        )
                        self.registry.detect(
                            [(p.desc, raw) for p, raw in zip(sig.params, values)]
                        )
                    else:
                        tracker.push_window((), [], lambda base, n, rid: None)
                self.engine.corpus.observe_event(event, _value_type_names(event, sig))
                command = PROCEED
                if self.engine.decide(event.crossing_index, rng):
                    command, records = self.engine.propose(event, sig, tracker.by_id, rng)
                    log.extend(records)
                session.send_command(command)
                if event.kind in (EventKind.CALL_EXIT, EventKind.CALLBACK_EXIT):
                    tracker.pop_window()
                elif (
                    event.kind is EventKind.CALL_ENTRY
                    and command.kind is CommandKind.SKIP_CALL
                ):
                    # a skipped call emits no exit crossing; its window closes now
                    tracker.pop_window()
        except (ProtocolError, FrameError, CodecError):
            self.protocol_error_runs += 1
        finally:
            session.close()
        self.engine.end_run(RunStats(new_uniques, crossings))

    def _runtime_sig(self, event: Event) -> Optional[FunctionSig]:
        try:
            return self.spec.function(event.symbol)
        except KeyError:
            pass
        return self.registry.sig_for(event.symbol)

    # -- reporting -------------------------------------------------------------

    def _build_report(self) -> CampaignReport:
        valid = self.database.unique("valid")
        fps = self.database.unique("fp")
        unattr = self.database.unique("unattributable")
        impact: dict[str, tuple[int, int]] = {c: (0, 0) for c in IMPACT_COLUMNS}
        for r in valid:
            col = IMPACT_NAMES[r.access_kind]
            count, arb = impact[col]
            impact[col] = (count + 1, arb + (1 if r.arbitrary == "Arbitrary" else 0))
        victims = {r.victim_component for r in valid if r.victim_component is not None}
        name = getattr(getattr(self.adapter, "scenario", None), "name", None) or "target"
        report = CampaignReport(
            scenario=name,
            trust_model=self.spec.direction.value,
            api_name=self.spec.malicious_component.name
            if self.spec.direction is Direction.SANDBOX
            else next(c.name for c in self.spec.components if c.role is Role.VICTIM),
            raw_crash_count=self.raw_crash_count,
            dedup_count=len(valid),
            victims=len(victims),
            callers=getattr(self.adapter, "callers", 1),
            coverage_reached=len(
                self.reached_symbols & {f.symbol for f in self.spec.api_functions}
            ),
            coverage_total=len(self.spec.api_functions),
            impact=impact,
            fp_count=len(fps),
            unattributable_count=len(unattr),
            unreproduced_count=self.pipeline.unreproduced_count,
            protocol_error_runs=self.protocol_error_runs,
            runs_executed=self.runs_executed,
            stop_reason=self.stop_reason,
            saturated=self.engine.threshold.saturated,
            final_threshold=self.engine.threshold.threshold,
            crashes=[r.to_json() for r in self.database.unique()],
        )
        if self.config.output_dir is not None:
            self._write_outputs(report)
        return report

    def _write_outputs(self, report: CampaignReport) -> None:
        from .report import emit_crash_bundle

        out = self.config.output_dir
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        emit_crash_bundle(report, out)
        (out / "corpus.json").write_text(self.engine.corpus.dump())
        # wall-clock metadata lives apart from the deterministic bundle
        (out / "meta.json").write_text(
            json.dumps({"finished_unix": time.time(), "seed": self.config.seed})
        )


def run_campaign(config: CampaignConfig, adapter=None) -> CampaignReport:
    return Campaign(config, adapter=adapter).run()
