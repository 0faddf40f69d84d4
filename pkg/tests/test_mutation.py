import json
import random

from hypothesis import given, settings, strategies as st

from civfuzz.iface import (
    Direction,
    FieldDesc,
    FunctionSig,
    Param,
    ParamRole,
    TypeDescriptor,
    TypeKind,
    load_interface_spec,
)
from civfuzz.mutation import (
    AlterationRecord,
    Corpus,
    LEGAL_STRATEGIES,
    MutationConfig,
    MutationEngine,
    RunStats,
    StrategyId,
    ThresholdState,
    alterable_loci,
    decide_alter,
    strategy_legal_for,
    update_threshold,
)
from civfuzz.wire import (
    CommandKind,
    Event,
    EventKind,
    LocusKind,
    arg,
    callback_arg,
    callback_return,
    return_value,
)
from tests.test_iface import base_doc


def _spec(direction="sandbox"):
    doc = base_doc()
    doc["direction"] = direction
    doc["memory_map_hints"] = [
        {"name": "zero_page", "base": 0, "length": 4096},
        {"name": "unmapped_probe", "base": 0xDEAD0000, "length": 4096},
    ]
    return load_interface_spec(json.dumps(doc))


I32 = TypeDescriptor(TypeKind.INTEGER, 32, "i32", signed=True)
PTR = TypeDescriptor(TypeKind.ADDRESS, 64, "buf*", pointee=TypeDescriptor(TypeKind.RAW, 512, "buf"))


def _entry_event(n_args=3, kind=EventKind.CALL_ENTRY, snapshots=()):
    locus = arg if kind is EventKind.CALL_ENTRY else callback_arg
    return Event(
        kind,
        crossing_index=1,
        symbol="f",
        values=tuple((locus(i), (i).to_bytes(4, "little")) for i in range(n_args)),
        snapshots=tuple(snapshots),
    )


class TestAlterableLoci:
    def test_sandbox_call_entry_only_shared(self):
        event = _entry_event(3, snapshots=[(0, b"\x00" * 8)])
        loci = alterable_loci(event, Direction.SANDBOX)
        assert all(l.kind is LocusKind.SHARED_BYTE for l in loci)
        assert len(loci) == 8

    def test_safebox_call_entry_args_and_shared(self):
        event = _entry_event(3, snapshots=[(0, b"\x00" * 4)])
        loci = alterable_loci(event, Direction.SAFEBOX)
        kinds = {l.kind for l in loci}
        assert kinds == {LocusKind.ARG, LocusKind.SHARED_BYTE}
        assert sum(1 for l in loci if l.kind is LocusKind.ARG) == 3

    def test_empty_event_empty_list(self):
        event = Event(EventKind.CALL_ENTRY, crossing_index=0, symbol="f")
        assert alterable_loci(event, Direction.SANDBOX) == []

    def test_sandbox_exit_return_value(self):
        event = Event(
            EventKind.CALL_EXIT, crossing_index=2, symbol="f",
            values=((return_value(), b"\x00" * 4),),
        )
        loci = alterable_loci(event, Direction.SANDBOX)
        assert [l.kind for l in loci] == [LocusKind.RETURN_VALUE]
        assert alterable_loci(event, Direction.SAFEBOX) == []

    def test_safebox_callback_return(self):
        event = Event(
            EventKind.CALLBACK_EXIT, crossing_index=2, symbol="cb",
            values=((callback_return(), b"\x00" * 8),),
        )
        assert [l.kind for l in alterable_loci(event, Direction.SAFEBOX)] == [
            LocusKind.CALLBACK_RETURN
        ]
        assert alterable_loci(event, Direction.SANDBOX) == []


class TestDecide:
    def test_threshold_zero_always_alters(self):
        state = ThresholdState(threshold=0)
        cfg = MutationConfig()
        rng = random.Random(1)
        assert all(decide_alter(i, state, rng, cfg) for i in range(100))

    def test_cold_zero_never_alters_below_threshold(self):
        state = ThresholdState(threshold=5)
        cfg = MutationConfig(p_cold=0.0)
        rng = random.Random(1)
        assert not any(decide_alter(2, state, rng, cfg) for _ in range(100))

    def test_cold_rate_monte_carlo(self):
        # Bernoulli contract: below the threshold the alteration rate is p_cold
        state = ThresholdState(threshold=5)
        cfg = MutationConfig(p_cold=0.1)
        rng = random.Random(0xBEEF)
        trials = 10_000
        hits = sum(decide_alter(2, state, rng, cfg) for _ in range(trials))
        assert abs(hits / trials - 0.1) <= 0.01


class TestThresholdUpdate:
    def test_patience_runs_without_crash_bumps(self):
        state = ThresholdState()
        cfg = MutationConfig(patience=20, step=7)
        for _ in range(19):
            update_threshold(state, RunStats(0, 10), cfg)
        assert state.threshold == 0
        update_threshold(state, RunStats(0, 10), cfg)
        assert state.threshold == 7
        assert state.runs_since_new_crash == 0

    def test_new_crash_resets_counter(self):
        state = ThresholdState(runs_since_new_crash=12)
        update_threshold(state, RunStats(2, 10), MutationConfig())
        assert state.runs_since_new_crash == 0
        assert state.threshold == 0

    def test_default_step_is_mean_crossings(self):
        state = ThresholdState()
        cfg = MutationConfig(patience=2, step=None)
        update_threshold(state, RunStats(0, 10), cfg)
        update_threshold(state, RunStats(0, 20), cfg)
        assert state.threshold == 15

    def test_saturation_flag(self):
        state = ThresholdState()
        cfg = MutationConfig(patience=1, step=100)
        update_threshold(state, RunStats(0, 10), cfg)
        assert state.threshold == 100
        assert state.saturated  # 100 > 2 * 10

    def test_threshold_monotonically_nondecreasing(self):
        state = ThresholdState()
        cfg = MutationConfig(patience=3)
        rng = random.Random(5)
        prev = 0
        for _ in range(60):
            update_threshold(state, RunStats(rng.randrange(2), rng.randrange(5, 30)), cfg)
            assert state.threshold >= prev
            prev = state.threshold


class TestCorpus:
    def test_observe_then_pure_replay(self):
        corpus = Corpus()
        corpus.observe("t", b"\x01\x02")
        assert corpus.sample("t", random.Random(0), mutation_probability=0.0) == b"\x01\x02"

    def test_empty_pool_returns_absent(self):
        assert Corpus().sample("t", random.Random(0)) is None

    def test_fifo_eviction_at_cap(self):
        corpus = Corpus(cap=256)
        for i in range(257):
            corpus.observe("t", i.to_bytes(4, "little"))
        pool = corpus.pool("t")
        assert len(pool) == 256
        assert (0).to_bytes(4, "little") not in pool
        assert (256).to_bytes(4, "little") in pool

    def test_mutation_is_single_byte_edit(self):
        corpus = Corpus()
        corpus.observe("t", bytes(8))
        rng = random.Random(3)
        value = corpus.sample("t", rng, mutation_probability=1.0)
        assert len(value) == 8
        assert sum(a != b for a, b in zip(value, bytes(8))) == 1

    def test_sample_other_excludes_own_pool(self):
        corpus = Corpus()
        corpus.observe("a", b"\xaa")
        corpus.observe("b", b"\xbb")
        for seed in range(20):
            got = corpus.sample_other("a", random.Random(seed))
            assert got == b"\xbb"

    def test_dump_load_round_trip(self):
        corpus = Corpus(cap=8)
        corpus.observe("a", b"\x01", "observed")
        corpus.observe("b", b"\x02", "injected")
        loaded = Corpus.load(corpus.dump())
        assert loaded.pool("a") == [b"\x01"]
        assert loaded.pool("b") == [b"\x02"]


def _engine(direction="sandbox", **kw):
    return MutationEngine(_spec(direction), MutationConfig(**kw))


def _exit_event(desc=PTR, raw=None):
    raw = raw if raw is not None else (0x600100).to_bytes(8, "little")
    return Event(
        EventKind.CALL_EXIT, crossing_index=3, symbol="md_feed",
        values=((return_value(), raw),),
    )


def _sig(ret=PTR, params=()):
    return FunctionSig("md_feed", tuple(params), ret, False, "lib")


class TestPropose:
    def test_deterministic_given_seed(self):
        ev = _exit_event()
        for seed in range(5):
            a = _engine().propose(ev, _sig(), {}, random.Random(seed))
            b = _engine().propose(ev, _sig(), {}, random.Random(seed))
            assert a == b

    def test_records_never_target_illegal_loci(self):
        engine = _engine("sandbox")
        ev = _entry_event(3)  # sandbox call entry: nothing alterable
        cmd, records = engine.propose(ev, _sig(params=[Param("a", I32)] * 3), {}, random.Random(1))
        non_skip = [r for r in records if not r.is_skip]
        assert non_skip == []

    def test_strategy_type_legality_over_many_proposals(self):
        engine = _engine("sandbox", skip_call_probability=0.0)
        rng = random.Random(9)
        for i in range(300):
            ev = _exit_event()
            _, records = engine.propose(ev, _sig(), {}, rng)
            for r in records:
                assert strategy_legal_for(r.strategy_id, TypeKind.ADDRESS)

    def test_int_limit_value_is_known_limit(self):
        engine = _engine("safebox", skip_call_probability=0.0, reuse_probability=0.0)
        sig = FunctionSig("md_feed", (Param("n", I32),), None, False, "lib")
        ev = Event(
            EventKind.CALL_ENTRY, crossing_index=0, symbol="md_feed",
            values=((arg(0), (5).to_bytes(4, "little")),),
        )
        seen = set()
        rng = random.Random(11)
        for _ in range(400):
            _, records = engine.propose(ev, sig, {}, rng)
            for r in records:
                if r.strategy_id is StrategyId.INT_LIMIT:
                    seen.add(int.from_bytes(r.new_bytes, "little"))
        limits = {0, 2**31 - 1, 2**31, 2**32 - 1}
        assert seen & limits
        assert seen - limits == set()  # no offset placement inside a 32-bit value

    def test_pointer_zero_page_lands_in_zero_page(self):
        engine = _engine("sandbox", skip_call_probability=0.0, reuse_probability=0.0)
        rng = random.Random(2)
        for _ in range(300):
            _, records = engine.propose(_exit_event(), _sig(), {}, rng)
            for r in records:
                if r.strategy_id is StrategyId.PTR_ZERO_PAGE:
                    assert int.from_bytes(r.new_bytes, "little") < 4096

    def test_ptr_invalid_lands_in_probe_hint(self):
        engine = _engine("sandbox", skip_call_probability=0.0, reuse_probability=0.0)
        rng = random.Random(2)
        hits = 0
        for _ in range(300):
            _, records = engine.propose(_exit_event(), _sig(), {}, rng)
            for r in records:
                if r.strategy_id is StrategyId.PTR_INVALID:
                    addr = int.from_bytes(r.new_bytes, "little")
                    assert 0xDEAD0000 <= addr < 0xDEAD0000 + 4096
                    hits += 1
        assert hits

    def test_replay_same_type_only_from_matching_pool(self):
        # fresh engine per draw: pools hold exactly one value per type, so the
        # provenance of each replay is unambiguous
        for seed in range(300):
            engine = _engine("sandbox", skip_call_probability=0.0, reuse_probability=1.0,
                             mutation_probability=0.0)
            engine.corpus.observe("buf*", (0x1234).to_bytes(8, "little"))
            engine.corpus.observe("other*", (0x9999).to_bytes(8, "little"))
            _, records = engine.propose(_exit_event(), _sig(), {}, random.Random(seed))
            for r in records:
                if r.strategy_id is StrategyId.PTR_REPLAY_SAME_TYPE:
                    assert r.new_bytes == (0x1234).to_bytes(8, "little")
                elif r.strategy_id is StrategyId.PTR_REPLACE_DIFF_TYPE:
                    assert int.from_bytes(r.new_bytes, "little") == 0x9999

    def test_empty_pool_falls_back_to_type_default(self):
        engine = _engine("sandbox", skip_call_probability=0.0, reuse_probability=1.0)
        rng = random.Random(4)
        _, records = engine.propose(_exit_event(), _sig(), {}, rng)
        for r in records:
            assert r.strategy_id in (StrategyId.PTR_INVALID,)

    def test_skip_call_record_has_no_old_bytes(self):
        engine = _engine("sandbox", skip_call_probability=1.0)
        ev = _entry_event(0)
        cmd, records = engine.propose(ev, _sig(ret=I32), {}, random.Random(1))
        assert cmd.kind is CommandKind.SKIP_CALL
        assert records[0].strategy_id is StrategyId.SKIP_CALL
        assert records[0].old_bytes == b""
        assert len(cmd.synthetic_return) == 4

    def test_skip_probe_owns_the_whole_run(self):
        engine = _engine("sandbox", skip_call_probability=1.0)
        engine.begin_run()
        cmd, _ = engine.propose(_entry_event(0), _sig(ret=I32), {}, random.Random(1))
        assert cmd.kind is CommandKind.SKIP_CALL
        cmd2, records2 = engine.propose(_exit_event(), _sig(), {}, random.Random(2))
        assert cmd2.kind is CommandKind.PROCEED and records2 == []
        engine.begin_run()
        cmd3, _ = engine.propose(_entry_event(0), _sig(ret=I32), {}, random.Random(1))
        assert cmd3.kind is CommandKind.SKIP_CALL

    def test_nonviable_patterns_avoided(self):
        engine = _engine("sandbox", skip_call_probability=0.0, nonviable_avoidance=1.0,
                         reuse_probability=0.0)
        rng = random.Random(7)
        _, records = engine.propose(_exit_event(), _sig(), {}, rng)
        assert records
        # poison every pointer strategy for this locus/type
        for strat in LEGAL_STRATEGIES[TypeKind.ADDRESS]:
            engine.nonviable.add(engine._pattern(return_value(), strat, "buf*"))
        for seed in range(30):
            _, records = engine.propose(_exit_event(), _sig(), {}, random.Random(seed))
            assert records == []

    def test_lock_field_only_scrambled(self):
        lock_agg = TypeDescriptor(
            TypeKind.AGGREGATE, 128, "st",
            fields=(
                FieldDesc("x", 0, TypeDescriptor(TypeKind.INTEGER, 64, "u64")),
                FieldDesc("lk", 8, TypeDescriptor(TypeKind.LOCK, 64, "lock_t")),
            ),
        )
        engine = _engine("sandbox", skip_call_probability=0.0)
        ev = Event(
            EventKind.CALL_EXIT, crossing_index=1, symbol="md_feed",
            values=(), snapshots=((0, bytes(16)),),
        )
        regions = {0: (0x600000, lock_agg, 16)}
        rng = random.Random(3)
        for _ in range(200):
            _, records = engine.propose(ev, _sig(ret=None), regions, rng)
            for r in records:
                if r.locus.offset >= 8 and r.locus.kind is LocusKind.SHARED_BYTE:
                    assert r.strategy_id is StrategyId.LOCK_SCRAMBLE
                    assert int.from_bytes(r.new_bytes, "little") != 0


# every kind has at least one legal strategy, and randomized descriptors never
# produce an illegal pairing
@settings(max_examples=200, deadline=None)
@given(kind=st.sampled_from(list(TypeKind)), seed=st.integers(0, 2**32 - 1))
def test_legality_total_over_kinds(kind, seed):
    assert LEGAL_STRATEGIES[kind]
    rng = random.Random(seed)
    strat = rng.choice(LEGAL_STRATEGIES[kind])
    assert strategy_legal_for(strat, kind)


def test_alteration_record_json_round_trip():
    record = AlterationRecord(
        crossing_index=5,
        locus=arg(2),
        strategy_id=StrategyId.INT_LIMIT,
        old_bytes=b"\x01\x00",
        new_bytes=b"\xff\x7f",
        target_type_name="i16",
        param_role=ParamRole.SIZE,
    )
    assert AlterationRecord.from_json(record.to_json()) == record


def test_low_confidence_callback_values_fuzzed_as_raw_words():
    # undeclared callback parameters fall back to word-sized raw buffers
    from civfuzz.mutation import candidate_slots

    spec = _spec("sandbox")
    sig = FunctionSig("cb@0x400010", (), None, True, "app", low_confidence=True)
    ev = Event(
        EventKind.CALLBACK_ENTRY, crossing_index=3, symbol="cb@0x400010",
        values=((callback_arg(0), bytes(8)), (callback_arg(1), bytes(8))),
    )
    slots = candidate_slots(ev, Direction.SANDBOX, sig, {}, 64)
    assert len(slots) == 2
    assert all(s.desc.kind is TypeKind.RAW and s.desc.size_bits == 64 for s in slots)


def test_shared_byte_edit_narrows_to_single_byte_directive():
    # an edit inside a shared object produces a one-byte directive anchored
    # at the edited offset, not a whole-region rewrite
    blob = TypeDescriptor(TypeKind.RAW, 512, "obj")
    engine = _engine("sandbox", skip_call_probability=0.0)
    ev = Event(
        EventKind.CALL_EXIT, crossing_index=2, symbol="md_feed",
        values=(), snapshots=((0, bytes(range(64))),),
    )
    regions = {0: (0x600000, blob, 64)}
    rng = random.Random(17)
    seen = 0
    for _ in range(50):
        _, records = engine.propose(ev, _sig(ret=None), regions, rng)
        for r in records:
            assert r.strategy_id is StrategyId.BYTE_EDIT_AT_OFFSET
            assert r.locus.kind is LocusKind.SHARED_BYTE
            assert len(r.new_bytes) == 1
            assert r.old_bytes == bytes([r.locus.offset])
            assert r.new_bytes != r.old_bytes
            seen += 1
    assert seen > 10
