import random

import pytest
from hypothesis import given, settings, strategies as st

from civfuzz.errors import ProtocolError, ScenarioError
from civfuzz.sim.machine import SimAdapter, reset_launch_counter, workload_order
from civfuzz.sim.memory import MemoryFault, SimMemory
from civfuzz.sim.scenario import load_corpus
from civfuzz.wire import (
    AccessKind,
    Command,
    CommandKind,
    EventKind,
    PROCEED,
    TERMINATE,
    arg,
    callback_arg,
    encode,
    return_value,
    shared_byte,
)


def _mem():
    mem = SimMemory(64)
    mem.add_region("text", 0x400000, 4096, "rx", "text")
    mem.add_region("data", 0x600000, 4096, "rw", "heap")
    mem.add_region("heap", 0x700000, 65536, "rw", "heap")
    mem.set_alloc_region("heap", 4096)
    return mem


class TestMemoryModel:
    def test_read_write_round_trip(self):
        mem = _mem()
        mem.write(0x600010, b"\xde\xad")
        assert mem.read(0x600010, 2) == b"\xde\xad"

    def test_zero_page_always_faults(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.read(0x10, 4)
        assert e.value.address == 0x10
        assert e.value.kind is AccessKind.READ

    def test_fault_address_is_first_failing_byte(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.read(0x600FF0, 64)  # runs off the end of data
        assert e.value.address == 0x601000

    def test_write_to_text_faults_as_write(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.write(0x400010, b"\x00")
        assert e.value.kind is AccessKind.WRITE

    def test_exec_outside_text_faults(self):
        mem = _mem()
        mem.check_exec(0x400010)
        with pytest.raises(MemoryFault) as e:
            mem.check_exec(0x600010)
        assert e.value.kind is AccessKind.EXEC

    def test_overlapping_regions_rejected(self):
        mem = _mem()
        with pytest.raises(ScenarioError):
            mem.add_region("bad", 0x600800, 4096, "rw", "heap")

    def test_zero_page_region_rejected(self):
        mem = SimMemory(64)
        with pytest.raises(ScenarioError):
            mem.add_region("bad", 0, 4096, "rw", "heap")

    def test_copy_read_fault_precedes_write_fault(self):
        mem = _mem()
        # src fails at +16, dst would fail at +4096: read side wins
        with pytest.raises(MemoryFault) as e:
            mem.copy(0x600000, 0x600FF0, 64)
        assert e.value.kind is AccessKind.READ
        assert e.value.address == 0x601000

    def test_copy_write_fault_at_boundary(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.copy(0x600FC0, 0x600000, 65)
        assert e.value.kind is AccessKind.WRITE
        assert e.value.address == 0x601000

    def test_huge_copy_is_cheap(self):
        mem = _mem()
        with pytest.raises(MemoryFault):
            mem.copy(0x600000, 0x700000, 2**31 - 1)

    def test_alloc_and_free(self):
        mem = _mem()
        a = mem.alloc(32)
        assert 0x700000 <= a < 0x710000
        mem.free(a)

    def test_free_of_unallocated_is_misuse(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.free(0x700008)
        assert e.value.kind is AccessKind.ALLOC_MISUSE

    def test_double_free_is_misuse(self):
        mem = _mem()
        a = mem.alloc(8)
        mem.free(a)
        with pytest.raises(MemoryFault) as e:
            mem.free(a)
        assert e.value.kind is AccessKind.ALLOC_MISUSE

    def test_oversized_alloc_is_misuse(self):
        mem = _mem()
        with pytest.raises(MemoryFault) as e:
            mem.alloc(4097)
        assert e.value.kind is AccessKind.ALLOC_MISUSE

    def test_negative_as_unsigned_alloc_is_misuse(self):
        mem = _mem()
        with pytest.raises(MemoryFault):
            mem.alloc(0xFFFFFFFF)

    def test_lock_scrambled_value_deadlocks(self):
        mem = _mem()
        mem.lock_acquire(0x600040)
        mem.lock_release(0x600040)
        mem.write(0x600040, b"\x77" * 8)
        with pytest.raises(MemoryFault) as e:
            mem.lock_acquire(0x600040)
        assert e.value.kind is AccessKind.DEADLOCK
        assert e.value.address == 0x600040

    # memory-model soundness: in-region accesses never fault, out-of-region
    # accesses fault at an address outside every permitting region
    @settings(max_examples=300, deadline=None)
    @given(
        addr=st.integers(0, 0x800000),
        length=st.integers(1, 256),
        op=st.sampled_from(["read", "write"]),
    )
    def test_soundness_randomized_accesses(self, addr, length, op):
        mem = _mem()
        perm = "r" if op == "read" else "w"
        expected_ok = mem.first_fault(addr, length, perm) is None
        try:
            if op == "read":
                mem.read(addr, length)
            else:
                mem.write(addr, bytes(length))
            assert expected_ok
        except MemoryFault as fault:
            assert not expected_ok
            region = mem._region_for(fault.address, perm)
            assert region is None


def _drive(session, commands=None):
    """Serve a session: apply per-crossing commands, Proceed elsewhere.

    Returns (events, crash payload or None).
    """
    commands = commands or {}
    events = []
    crash = None
    while True:
        ev = session.recv_event()
        events.append(ev)
        if ev.kind is EventKind.READY:
            continue
        if ev.kind is EventKind.CRASH_REPORT:
            crash = ev.crash
            session.send_command(TERMINATE)
            break
        if ev.kind is EventKind.WORKLOAD_DONE:
            session.send_command(TERMINATE)
            break
        session.send_command(commands.get(ev.crossing_index, PROCEED))
    return events, crash


@pytest.fixture(scope="module")
def corpus():
    return {s.name: s for s in load_corpus()}


class TestSimBaseline:
    def test_every_scenario_runs_clean(self, corpus):
        for scenario in corpus.values():
            events, crash = _drive(SimAdapter(scenario).launch(0, "base"))
            assert crash is None, scenario.name
            assert events[-1].kind is EventKind.WORKLOAD_DONE

    def test_crossing_index_strictly_increases(self, corpus):
        events, _ = _drive(SimAdapter(corpus["mdpipe"]).launch(0, "base"))
        crossings = [e.crossing_index for e in events if e.is_crossing]
        assert crossings == sorted(set(crossings))

    def test_event_stream_deterministic(self, corpus):
        a, _ = _drive(SimAdapter(corpus["mdpipe"]).launch(0, "s"))
        b, _ = _drive(SimAdapter(corpus["mdpipe"]).launch(0, "s"))
        assert [encode(e) for e in a] == [encode(e) for e in b]

    def test_full_endpoint_coverage_single_pass(self, corpus):
        scenario = corpus["mdpipe"]
        events, _ = _drive(SimAdapter(scenario).launch(0, "base"))
        called = {e.symbol for e in events if e.kind is EventKind.CALL_ENTRY}
        assert called == {f.symbol for f in scenario.spec.api_functions}

    def test_snapshots_cover_live_regions(self, corpus):
        events, _ = _drive(SimAdapter(corpus["mdpipe"]).launch(0, "base"))
        parse_entry = next(
            e for e in events if e.kind is EventKind.CALL_ENTRY and e.symbol == "plib_parse"
        )
        # aggregate pointee, its error-string target, and the text buffer
        assert len(parse_entry.snapshots) == 3
        assert len(parse_entry.snapshots[0][1]) == 32


class TestWorkload:
    def test_zero_repetitions_rejected(self, corpus):
        with pytest.raises(ScenarioError):
            workload_order(corpus["mdpipe"], 0, "x")

    def test_jitter_shuffles_order_by_seed(self, corpus):
        scenario = corpus["keyvault"]
        orders = {
            tuple(c.symbol for c in workload_order(scenario, 1, f"seed{i}")) for i in range(12)
        }
        assert len(orders) > 1

    def test_no_jitter_is_stable(self, corpus):
        scenario = corpus["mdpipe"]
        a = [c.symbol for c in workload_order(scenario, 2, "a")]
        b = [c.symbol for c in workload_order(scenario, 2, "b")]
        assert a == b


class TestAlterations:
    def test_pointer_zero_on_documented_arg_crashes_null(self, corpus):
        # keyvault's credential pointer, forced to the zero page at call entry
        scenario = corpus["keyvault"]
        idx = None
        session = SimAdapter(scenario).launch(0, "probe")
        events = []
        crash = None
        while True:
            ev = session.recv_event()
            events.append(ev)
            if ev.kind is EventKind.READY:
                continue
            if ev.kind in (EventKind.CRASH_REPORT, EventKind.WORKLOAD_DONE):
                crash = ev.crash
                session.send_command(TERMINATE)
                break
            if ev.kind is EventKind.CALL_ENTRY and ev.symbol == "v_auth":
                session.send_command(
                    Command(CommandKind.ALTER, directives=((arg(0), (0).to_bytes(8, "little")),))
                )
            else:
                session.send_command(PROCEED)
        assert crash is not None
        assert crash.access_kind is AccessKind.NULL_DEREF
        assert crash.frames[0].label == "v_auth"

    def test_skip_call_suppresses_body_and_exit(self, corpus):
        scenario = corpus["mdpipe"]
        session = SimAdapter(scenario).launch(0, "probe")
        commands = {0: Command(CommandKind.SKIP_CALL, synthetic_return=b"")}
        events, crash = _drive(session, commands)
        symbols = [(e.kind, e.symbol) for e in events if e.is_crossing]
        assert (EventKind.CALLBACK_ENTRY, "cb_ready") not in symbols
        assert (EventKind.CALL_EXIT, "plib_init") not in symbols
        # the init-was-skipped consistency check fires in the caller
        assert crash is not None
        assert crash.access_kind is AccessKind.NULL_DEREF
        assert crash.frames[0].label == "app_after_plib_init"

    def test_skip_call_rejected_outside_call_entry(self, corpus):
        session = SimAdapter(corpus["mdpipe"]).launch(0, "probe")
        with pytest.raises(ProtocolError):
            _drive(session, {1: Command(CommandKind.SKIP_CALL, synthetic_return=b"")})

    def test_shared_directive_outside_snapshot_rejected(self, corpus):
        session = SimAdapter(corpus["mdpipe"]).launch(0, "probe")
        bad = Command(CommandKind.ALTER, directives=((shared_byte(99, 0), b"\x00"),))
        with pytest.raises(ProtocolError):
            _drive(session, {4: bad})

    def test_shared_write_applies_to_memory(self, corpus):
        # scrambling the session lock in the config struct deadlocks the
        # data callback
        scenario = corpus["mdpipe"]
        session = SimAdapter(scenario).launch(0, "probe")
        events = []
        crash = None
        while True:
            ev = session.recv_event()
            events.append(ev)
            if ev.kind is EventKind.READY:
                continue
            if ev.kind in (EventKind.CRASH_REPORT, EventKind.WORKLOAD_DONE):
                crash = ev.crash
                session.send_command(TERMINATE)
                break
            if ev.kind is EventKind.CALLBACK_ENTRY and ev.symbol == "cb_data":
                rid = ev.snapshots[0][0]
                session.send_command(
                    Command(CommandKind.ALTER, directives=((shared_byte(rid, 24), b"\x55" * 8),))
                )
            else:
                session.send_command(PROCEED)
        assert crash is not None
        assert crash.access_kind is AccessKind.DEADLOCK

    def test_forwarded_corruption_crashes_non_adjacent_component(self, corpus):
        # the parser library hands a corrupted size to the app callback, which
        # forwards it untouched into the stream compressor
        scenario = corpus["mdpipe"]
        session = SimAdapter(scenario).launch(0, "probe")
        crash = None
        while True:
            ev = session.recv_event()
            if ev.kind is EventKind.READY:
                continue
            if ev.kind in (EventKind.CRASH_REPORT, EventKind.WORKLOAD_DONE):
                crash = ev.crash
                session.send_command(TERMINATE)
                break
            if ev.kind is EventKind.CALLBACK_ENTRY and ev.symbol == "cb_send":
                session.send_command(
                    Command(
                        CommandKind.ALTER,
                        directives=((callback_arg(1), (0x7FFFFFFF).to_bytes(4, "little")),),
                    )
                )
            else:
                session.send_command(PROCEED)
        assert crash is not None
        assert crash.frames[0].label == "z2_push"
        assert crash.access_kind is AccessKind.WRITE


class TestNondeterminism:
    def test_gate_flips_between_launches(self, corpus):
        scenario = corpus["flaky"]
        reset_launch_counter(0)
        force_error = {1: Command(
            CommandKind.ALTER,
            directives=((return_value(), (1).to_bytes(4, "little")),),
        )}
        _, crash_even = _drive(SimAdapter(scenario).launch(0, "n"), force_error)
        _, crash_odd = _drive(SimAdapter(scenario).launch(0, "n"), force_error)
        assert crash_even is not None
        assert crash_odd is None


def test_planted_corpus_completeness(corpus):
    """The acceptance corpus carries at least one vulnerability per class,
    the multi-step error path, the multi-victim forwarding chain, the
    allocator exposure, and one intentional false positive."""
    acceptance = [s for s in corpus.values() if s.acceptance]
    classes = set()
    categories = set()
    dispositions = set()
    for scenario in acceptance:
        for p in scenario.planted:
            classes |= p.classes
            categories.add(p.category)
            dispositions.add(p.disposition)
    assert {"DC1", "DC2", "DC3", "TV1", "TV2"} <= classes
    assert {"error-path", "forwarding", "allocator"} <= categories
    assert "fp" in dispositions
    assert "unattributable" in dispositions


def test_no_unplanted_crash_sites_across_seeds(corpus):
    """Soundness of the seeded corpus: whatever the engine does, every crash
    lands on a manifest entry with the manifest's disposition."""
    from civfuzz.campaign import Campaign, CampaignConfig

    for scenario in corpus.values():
        if not scenario.acceptance:
            continue
        planted = {(p.site, p.kind.name): p.disposition for p in scenario.planted}
        for seed in (101, 202, 303):
            campaign = Campaign(
                CampaignConfig(seed=seed, max_runs=60), adapter=SimAdapter(scenario)
            )
            campaign.run()
            for record in campaign.database.unique():
                key = ((record.frames[0].label, record.frames[0].offset), record.access_kind.name)
                assert key in planted, (scenario.name, seed, key)
                assert record.disposition == planted[key], (scenario.name, seed, key)
