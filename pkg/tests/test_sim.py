import io
from dataclasses import replace

import pytest

from relayrank.errors import ConfigError
from relayrank.model import CacheState
from relayrank.sim.audit import audit_csv, audit_trace
from relayrank.sim.engine import Mode, SloConfig, SystemConfig, run
from relayrank.sim.search import apply_knob, find_max_seq, slo_compliant_qps, sweep
from relayrank.sim.workload import WorkloadConfig
from relayrank.tiers import Event, TraceRecord

SMALL = WorkloadConfig(offered_qps=80, horizon_s=3, n_users=500, long_fraction=0.2)


@pytest.fixture(scope="module")
def relay_run():
    return run(SystemConfig(), SMALL, mode=Mode.RELAY, seed=3, return_sim=True)


def test_deterministic():
    a = run(SystemConfig(), SMALL, mode=Mode.RELAY_DRAM, seed=9, dram_hit_target=0.5)
    b = run(SystemConfig(), SMALL, mode=Mode.RELAY_DRAM, seed=9, dram_hit_target=0.5)
    assert a.summary() == b.summary() and a.histograms == b.histograms
    c = run(SystemConfig(), SMALL, mode=Mode.RELAY_DRAM, seed=10, dram_hit_target=0.5)
    assert c.summary() != a.summary()


def test_every_query_completes(relay_run):
    report, sim = relay_run
    assert report.completed == report.queries > 0
    assert sum(report.paths.values()) >= report.completed
    assert all(r.done >= r.t0 for r in sim.records)


def test_relay_trace_passes_audit(relay_run):
    report, sim = relay_run
    assert report.audit["violations"] == [] and report.audit["events"] > 0
    again = audit_csv(io.StringIO(sim.trace.to_csv()), sim.instance_capacities(), sim.trigger, sim.plan)
    assert again.ok


def test_relay_caches_get_used(relay_run):
    report, _ = relay_run
    assert report.paths.get("rank_cached_hbm", 0) > 0


def test_baseline_never_caches():
    report = run(SystemConfig(), SMALL, mode=Mode.BASELINE, seed=3)
    assert set(report.paths) <= {"rank_full"}


def test_remote_mode_is_flagged():
    w = replace(SMALL, long_fraction=0.5, offered_qps=150)
    report = run(SystemConfig(), w, mode=Mode.REMOTE, seed=1)
    assert report.audit["remote_fetches"] > 0


def test_auditor_catches_planted_violations(relay_run):
    _, sim = relay_run
    caps = sim.instance_capacities()
    inst = next(iter(caps))
    hbm_cap = caps[inst][0]
    recs = [TraceRecord(0, inst, "x", Event.ADMIT, "", 0, "compute"),
            TraceRecord(1, inst, "x", Event.INSERT, "hbm", hbm_cap + 1, CacheState.LIVE.value),
            TraceRecord(2, inst, "x", Event.EVICT, "hbm", hbm_cap + 1, CacheState.LIVE.value),
            TraceRecord(3, inst, "x", Event.REMOTE_FETCH, "remote", 10, "")]
    v = audit_trace(recs, caps, sim.trigger, sim.plan)
    assert v.occupancy_violations >= 1 and v.premature_evictions == 1 and v.remote_fetches == 1


def test_auditor_catches_rate_overrun(relay_run):
    _, sim = relay_run
    n = int(sim.plan.q_admit_max * sim.trigger.t_life) + 1
    recs = []
    for i in range(n):
        recs.append(TraceRecord(i, "special-0", f"u{i}", Event.ADMIT, "", 0, "compute"))
        recs.append(TraceRecord(i, "special-0", f"u{i}", Event.RELEASE, "", 0, ""))
    v = audit_trace(recs, sim.instance_capacities(), sim.trigger, sim.plan)
    assert v.rate_violations >= 1
    ok = audit_trace(recs[:-2], sim.instance_capacities(), sim.trigger, sim.plan)
    assert ok.rate_violations == 0


def test_closed_loop_conserves_clients():
    w = replace(SMALL, clients=16, horizon_s=1)
    report = run(SystemConfig(), w, mode=Mode.RELAY, seed=0)
    assert report.max_in_flight <= 16 and report.completed == report.queries


def test_slo_definition():
    w = replace(SMALL, long_fraction=0.2)
    r = run(SystemConfig(), w, SloConfig(success_rate=1e-9, pipeline_p99_ms=1e9, ranking_ms=1e9), Mode.RELAY, 0)
    assert r.slo_met and r.success_rate == 1.0
    r = run(SystemConfig(), w, SloConfig(ranking_ms=0.001), Mode.RELAY, 0)
    assert not r.slo_met and r.success_rate == 0.0


def test_search_edges():
    tiny = replace(SMALL, horizon_s=1, n_users=200)
    assert find_max_seq(SystemConfig(), tiny, SloConfig(ranking_ms=0.001), lo=100, hi=200) == 0
    assert slo_compliant_qps(SystemConfig(), tiny, SloConfig(ranking_ms=0.001)) == 0.0
    with pytest.raises(ConfigError):
        find_max_seq(SystemConfig(), tiny, lo=5, hi=1)


def test_sweep_rows_and_knobs():
    rows = sweep("items", [64, 512], SystemConfig(), replace(SMALL, horizon_s=1),
                 modes=(Mode.BASELINE, Mode.RELAY), seed=0)
    assert [(r["value"], r["mode"]) for r in rows] == [(64, "baseline"), (64, "relay"),
                                                        (512, "baseline"), (512, "relay")]
    with pytest.raises(ConfigError):
        apply_knob("bogus", 1, SystemConfig(), SMALL)
    p = apply_knob("layers", 8, SystemConfig(), SMALL)
    assert p.system.model.layers == 8
