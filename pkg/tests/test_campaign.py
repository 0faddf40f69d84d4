import json
from pathlib import Path

import pytest

from civfuzz.campaign import Campaign, CampaignConfig, CampaignReport, coverage_account, run_campaign
from civfuzz.errors import ConfigError
from civfuzz.iface import load_interface_spec
from civfuzz.mutation import MutationConfig
from civfuzz.sim.machine import SimAdapter
from civfuzz.sim.scenario import load_corpus
from civfuzz.wire import Event, EventKind
from tests.test_iface import base_doc


@pytest.fixture(scope="module")
def corpus():
    return {s.name: s for s in load_corpus()}


class TestConfig:
    def test_both_budgets_unbounded_rejected(self):
        with pytest.raises(ConfigError):
            CampaignConfig(spec_path=Path("x"), max_runs=None, time_budget=None).validate()

    def test_one_budget_suffices(self):
        CampaignConfig(spec_path=Path("x"), max_runs=10).validate()
        CampaignConfig(spec_path=Path("x"), time_budget=1.0).validate()

    def test_unknown_adapter(self):
        with pytest.raises(ConfigError):
            CampaignConfig(spec_path=Path("x"), adapter="dbi", max_runs=1).validate()

    def test_shim_requires_workload(self):
        with pytest.raises(ConfigError):
            CampaignConfig(spec_path=Path("x"), adapter="shim", max_runs=1).validate()


class TestCoverage:
    def _spec(self):
        return load_interface_spec(json.dumps(base_doc()))

    def test_all_functions_hit(self):
        spec = self._spec()
        events = [
            Event(EventKind.CALL_ENTRY, crossing_index=i, symbol=f.symbol)
            for i, f in enumerate(spec.functions)
        ]
        assert coverage_account(events, spec) == (4, 4)

    def test_no_events(self):
        assert coverage_account([], self._spec()) == (0, 4)

    def test_callback_only_activity_counts_nothing(self):
        doc = base_doc()
        doc["functions"].append(
            {"symbol": "on_x", "params": [], "return_type": None,
             "is_callback": True, "owner": "app"}
        )
        spec = load_interface_spec(json.dumps(doc))
        events = [
            Event(EventKind.CALLBACK_ENTRY, crossing_index=0, symbol="on_x"),
            Event(EventKind.CALL_ENTRY, crossing_index=1, symbol="on_x"),
        ]
        # callbacks are excluded from both numerator and denominator
        assert coverage_account(events, spec) == (0, 4)


class TestRunCampaign:
    def test_zero_runs_empty_report(self, corpus):
        cfg = CampaignConfig(seed=1, max_runs=0)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["mdpipe"]))
        assert report.raw_crash_count == 0
        assert report.dedup_count == 0
        assert report.coverage_reached == 0
        assert report.coverage_total == 4

    def test_small_campaign_finds_crashes(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=40)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["mdpipe"]))
        assert report.raw_crash_count > 0
        assert 0 < report.dedup_count <= report.raw_crash_count
        assert report.coverage_total == 4

    def test_audit_trail_present_on_every_crash(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=40)
        campaign = Campaign(cfg, adapter=SimAdapter(corpus["mdpipe"]))
        campaign.run()
        for record in campaign.database.unique():
            assert record.alteration_log, record.crash_id

    def test_forwarding_scenario_counts_two_victims(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=120)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["mdpipe"]))
        assert report.victims == 2

    def test_fp_records_excluded_from_impact(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=120)
        campaign = Campaign(cfg, adapter=SimAdapter(corpus["keyvault"]))
        report = campaign.run()
        assert report.fp_count >= 1
        impact_total = sum(c for c, _ in report.impact.values())
        assert impact_total == report.dedup_count
        # the engine was told which patterns corrupt the attacker itself
        assert campaign.engine.nonviable

    def test_unattributable_counted_separately(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=80)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["texware"]))
        assert report.unattributable_count >= 1
        impact_total = sum(c for c, _ in report.impact.values())
        assert impact_total == report.dedup_count

    def test_saturation_stops_campaign(self, corpus):
        mut = MutationConfig(patience=1, step=10_000)
        cfg = CampaignConfig(seed=9, max_runs=500, mutation=mut)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["texware"]))
        assert report.stop_reason == "saturation"
        assert report.saturated
        assert report.runs_executed < 500

    def test_threshold_suppresses_shallow_vuln_only(self, corpus):
        # freeze the threshold above the first call's crossings: the
        # init-skip vulnerability disappears while deeper ones survive
        mut = MutationConfig(p_cold=0.0, initial_threshold=4, adapt_threshold=False)
        cfg = CampaignConfig(seed=4, max_runs=150, mutation=mut)
        campaign = Campaign(cfg, adapter=SimAdapter(corpus["mdpipe"]))
        campaign.run()
        tops = {(r.frames[0].label, r.frames[0].offset) for r in campaign.database.unique()}
        assert ("app_after_plib_init", 2) not in tops
        assert ("cb_put", 0) in {t for t in tops}

    def test_replay_determinism_byte_identical_bundles(self, corpus, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = CampaignConfig(seed=11, max_runs=60, output_dir=out)
            run_campaign(cfg, adapter=SimAdapter(corpus["keyvault"]))
            outs.append(out)
        a_files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
        assert a_files == b_files
        for rel in a_files:
            if rel.name == "meta.json":  # wall-clock lives here, nowhere else
                continue
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel

    def test_report_round_trips_through_json(self, corpus):
        cfg = CampaignConfig(seed=4, max_runs=30)
        report = run_campaign(cfg, adapter=SimAdapter(corpus["keyvault"]))
        doc = json.loads(json.dumps(report.to_json()))
        assert CampaignReport.from_json(doc) == report


class _BrokenSession:
    def __init__(self):
        self.calls = 0

    def recv_event(self):
        from civfuzz.errors import FrameError

        raise FrameError("short read")

    def send_command(self, cmd):
        pass

    def close(self):
        pass


class _BrokenAdapter:
    callers = 1

    def __init__(self, spec):
        self.spec = spec

    def launch(self, run_id, run_seed):
        return _BrokenSession()


def test_protocol_error_runs_discarded_and_counted(corpus):
    adapter = _BrokenAdapter(corpus["mdpipe"].spec)
    report = run_campaign(CampaignConfig(seed=0, max_runs=5), adapter=adapter)
    assert report.protocol_error_runs == 5
    assert report.raw_crash_count == 0
    assert report.runs_executed == 5


def test_dedup_top_k_merges_sites(corpus):
    # full-stack hashing keeps the two texware pointer sites apart; a
    # one-frame key merges nothing here but must stay self-consistent
    full = run_campaign(
        CampaignConfig(seed=4, max_runs=60), adapter=SimAdapter(corpus["texware"])
    )
    top1 = run_campaign(
        CampaignConfig(seed=4, max_runs=60, dedup_top_k=1),
        adapter=SimAdapter(corpus["texware"]),
    )
    assert top1.dedup_count <= full.dedup_count
    assert top1.dedup_count > 0
