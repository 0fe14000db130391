"""End-to-end acceptance checks; each prints one ACCEPTANCE <n> PASS/FAIL line."""

import time
from dataclasses import replace

import numpy as np
import pytest

from relayrank.cli import main
from relayrank.instance import CACHED_PATHS, Path as ServePath
from relayrank.model import ModelConfig, kv_cache_bytes, max_deviation, random_sequence
from relayrank.router import InstancePool, Request, route
from relayrank.sim.costs import DEFAULT_COSTS, REFERENCE_MODEL
from relayrank.sim.engine import Mode, SloConfig, SystemConfig, resolve_trigger, run
from relayrank.sim.search import find_max_seq, sweep
from relayrank.tiers import Event
from relayrank.trigger import compute_capacity_plan
from relayrank.sim.workload import WorkloadConfig, make_users

from _support import MODEL, meta, rank_request, reference_scores, special, spill_to_dram

CONFIGS = __import__("pathlib").Path(__file__).resolve().parent.parent / "configs"


def _nondecreasing(xs):
    return all(a <= b for a, b in zip(xs, xs[1:]))


def test_1_cached_matches_full(verdict):
    with verdict(1, "cached vs full scores, 500 random instances") as v:
        rng = np.random.default_rng(20240601)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(500):
            layers, dim = int(rng.integers(1, 5)), int(rng.integers(1, 33))
            prefix = int(rng.integers(1, 257))
            n_user = int(rng.integers(0, min(prefix, 8) + 1))
            suffix = int(rng.integers(0, 33))
            n_short = int(rng.integers(0, suffix + 1))
            cfg = ModelConfig(layers, dim, 8, int(rng.integers(0, 2**31)))
            seq = random_sequence(rng, dim, n_user, prefix - n_user, n_short, suffix - n_short,
                                  int(rng.integers(1, 17)))
            worst = max(worst, max_deviation(cfg, seq))
        elapsed = time.perf_counter() - t0
        v.detail = f"max deviation {worst:.2e}, {elapsed:.1f}s"
        assert worst <= 1e-6
        assert elapsed < 60


def test_2_sizing(verdict):
    with verdict(2, "2K-token cache at 8 layers, dim 256, fp32") as v:
        got = kv_cache_bytes(ModelConfig(8, 256, 4, 0), 2048)
        v.detail = f"{got} B"
        assert got == 33_554_432 == 32 * 2**20
        assert kv_cache_bytes(ModelConfig(16, 256, 4, 0), 15000) == 491_520_000


def test_3_capacity_plan(verdict, capsys):
    import json
    with verdict(3, "capacity plan worked example") as v:
        assert main(["plan", "-c", str(CONFIGS / "capacity_example.ini"), "--format", "json"]) == 0
        row = json.loads(capsys.readouterr().out)
        v.detail = f"l_max={row['l_max']} q_admit_max={row['q_admit_max']} q_max={row['q_max']}"
        assert (row["l_max"], row["q_admit_max"], row["q_max"]) == (160, 150.0, 1500.0)
        assert row["binding_constraint"] == "compute"
        # Crossover at t_life = 160/150 s: short windows leave compute as the
        # binding limit, long windows make the HBM budget bind.
        assert row["hbm_bound_above_t_life"] == pytest.approx(160 / 150, abs=1e-6)
        base = json.loads(json.dumps(row))
        for t_life, binding in ((0.4, "compute"), (1.0, "compute"), (1.06, "compute"),
                                (1.07, "hbm"), (1.5, "hbm"), (4.0, "hbm")):
            assert main(["plan", "-c", str(CONFIGS / "capacity_example.ini"),
                         "--set", f"trigger.t_life={t_life}", "--format", "json"]) == 0
            r = json.loads(capsys.readouterr().out)
            assert r["binding_constraint"] == binding, (t_life, r)
            assert r["q_admit_max"] == pytest.approx(min(160 / t_life, 150.0))
            assert r["q_max"] == base["q_max"]


def test_4_affinity_and_churn(verdict):
    with verdict(4, "affinity on 100k keys; churn moves only the removed instance's keys") as v:
        pool = InstancePool.build(13, 10, 10)
        rng = np.random.default_rng(99)
        keys = [f"user-{int(x)}" for x in rng.integers(0, 2**62, size=100_000)]
        mismatched = sum(route(pool, Request.pre_infer(k)).instance_id
                         != route(pool, Request.rank(k, (0,), keyed=True)).instance_id for k in keys)
        assert mismatched == 0
        before = pool.owners(keys)
        fractions = []
        for victim in pool.special_ids:
            after = pool.remove_instance(victim).owners(keys)
            moved = [(a, b) for a, b in zip(before, after) if a != b]
            assert all(a == victim for a, _ in moved), f"foreign key moved when removing {victim}"
            frac = len(moved) / len(keys)
            fractions.append(frac)
            assert 0.1 / 5 <= frac <= 0.1 * 5, (victim, frac)
        v.detail = f"moved fraction {min(fractions):.4f}..{max(fractions):.4f}"


BURSTS = {
    "ranks_only": lambda k: ["rank"] * k,
    "rank_then_preinfer": lambda k: ["rank"] * (k - 1) + ["pre"],
    "preinfer_then_ranks": lambda k: ["pre"] + ["rank"] * (k - 1),
    "interleaved": lambda k: ["rank" if i % 2 == 0 else "pre" for i in range(k)],
}


def _burst(pattern, k, start, spacing_us):
    """Run one burst for a single user; returns (reload starts, outcomes, store)."""
    inst, loop, store = special()
    user = "burst-user"
    if start == "dram":
        spill_to_dram(inst, store, user)
    if start != "cold":
        inst.admit(meta(store, user), 0)
    elif "pre" in pattern:
        inst.admit(meta(store, user), 0)
    for i, kind in enumerate(pattern):
        t = i * spacing_us
        req = Request.pre_infer(user) if kind == "pre" else rank_request(store, user, 4, salt=i)
        loop.at(t, inst.handle, req)
    loop.run()
    reloads = sum(1 for r in inst.trace.records if r.event is Event.RELOAD_START and r.user_key == user)
    return reloads, inst.outcomes, store, user


def test_5_single_flight(verdict):
    with verdict(5, "single flight under bursts k in {2,5,10}") as v:
        cases = 0
        for k in (2, 5, 10):
            for name, make in BURSTS.items():
                for start in ("dram", "cold"):
                    for spacing in (0, 300, 2000):
                        pattern = make(k)
                        reloads, outcomes, store, user = _burst(pattern, k, start, spacing)
                        assert reloads == (1 if start == "dram" else 0), (k, name, start, spacing, reloads)
                        ranks = [o for o in outcomes if o.path is not ServePath.PREINFER_DONE]
                        assert len(ranks) == pattern.count("rank")
                        assert len(outcomes) == k
                        for o in ranks:
                            np.testing.assert_allclose(
                                o.scores, reference_scores(store, user, o.request.items), atol=MODEL.epsilon)
                            if start == "dram":
                                assert o.path in CACHED_PATHS, (k, name, spacing, o.path)
                        cases += 1
        v.detail = f"{cases} scripted bursts"


def test_6_invariant_audit(verdict):
    with verdict(6, "invariant audit over 10 x 60 s traces at 0.8x planned capacity") as v:
        system = SystemConfig()
        base = WorkloadConfig(horizon_s=60, long_fraction=0.5, p_refresh=0.3)
        trig = resolve_trigger(system, make_users(base), base.feature_dim)
        plan = compute_capacity_plan(trig)
        offered = 0.8 * plan.q_max / base.long_fraction
        totals = {"remote_fetches": 0, "occupancy_violations": 0, "premature_evictions": 0,
                  "rate_violations": 0, "live_violations": 0}
        events = 0
        for seed in range(10):
            mode = Mode.RELAY_DRAM if seed % 2 else Mode.RELAY
            w = replace(base, offered_qps=offered, seed=seed)
            report = run(system, w, mode=mode, seed=seed, dram_hit_target=0.5 if seed % 2 else 0.0)
            assert report.completed == report.queries
            events += report.audit["events"]
            for key in totals:
                totals[key] += report.audit[key]
        v.detail = f"{events} trace events, offered {offered:.0f} QPS, violations {totals}"
        assert all(x == 0 for x in totals.values())


@pytest.mark.slow
def test_7a_max_sequence(verdict):
    with verdict(7, "(a) longest feasible sequence: relay > baseline") as v:
        assert DEFAULT_COSTS.pre_coeffs[0] > 0
        w = WorkloadConfig(offered_qps=100, horizon_s=20, long_fraction=0.06)
        t0 = time.perf_counter()
        base = find_max_seq(SystemConfig(), w, mode=Mode.BASELINE, seed=0)
        relay = find_max_seq(SystemConfig(), w, mode=Mode.RELAY, seed=0)
        v.detail = f"baseline {base}, relay {relay} tokens, {time.perf_counter() - t0:.0f}s"
        assert relay > base > 0
        assert time.perf_counter() - t0 < 300


@pytest.mark.slow
def test_7b_dram_hit_rate(verdict):
    with verdict(7, "(b) SLO-compliant QPS nondecreasing in DRAM hit target") as v:
        w = WorkloadConfig(long_fraction=0.5, fixed_long_len=6000, n_users=2000, horizon_s=10)
        t0 = time.perf_counter()
        rows = sweep("dram_hit_target", [0.0, 0.5, 1.0], SystemConfig(), w, modes=(Mode.RELAY_DRAM,),
                     measure="max_qps", seed=0)
        qps = [r["slo_compliant_qps"] for r in rows]
        v.detail = f"QPS {qps}, {time.perf_counter() - t0:.0f}s"
        assert _nondecreasing(qps) and qps[-1] > qps[0]
        assert time.perf_counter() - t0 < 300


@pytest.mark.slow
def test_7c_concurrency(verdict):
    with verdict(7, "(c) baseline P99 rises with concurrency and crosses 50 ms before relay") as v:
        w = WorkloadConfig(long_fraction=0.06, fixed_long_len=3000, suffix_len=(32, 32),
                           n_users=5000, horizon_s=10)
        values = list(range(32, 321, 32))
        t0 = time.perf_counter()
        rows = sweep("concurrency", values, SystemConfig(), w, modes=(Mode.BASELINE, Mode.RELAY), seed=0)
        p99 = {m: [r["p99_rank_ms"] for r in rows if r["mode"] == m] for m in ("baseline", "relay")}

        def crossing(series):
            return next((c for c, p in zip(values, series) if p > 50.0), float("inf"))
        v.detail = (f"baseline crosses at C={crossing(p99['baseline'])}, relay at "
                    f"C={crossing(p99['relay'])}, {time.perf_counter() - t0:.0f}s")
        assert _nondecreasing(p99["baseline"])
        assert crossing(p99["baseline"]) < crossing(p99["relay"])
        assert time.perf_counter() - t0 < 300


@pytest.mark.slow
def test_7d_retrieval_slack(verdict):
    with verdict(7, "(d) retrieval slack: baseline flat, relay nondecreasing") as v:
        w = WorkloadConfig(long_fraction=0.06, fixed_long_len=6000, horizon_s=5)
        slo = SloConfig(budget="ranking")
        t0 = time.perf_counter()
        rows = sweep("retrieval_slack_ms", [0, 20, 40, 80], SystemConfig(), w, slo,
                     modes=(Mode.BASELINE, Mode.RELAY), measure="max_qps", seed=0,
                     search={"start": 100, "limit": 20000, "rel_tol": 0.02})
        qps = {m: [r["slo_compliant_qps"] for r in rows if r["mode"] == m] for m in ("baseline", "relay")}
        v.detail = f"baseline {qps['baseline']}, relay {qps['relay']}, {time.perf_counter() - t0:.0f}s"
        assert len(set(qps["baseline"])) == 1
        assert _nondecreasing(qps["relay"])
        assert time.perf_counter() - t0 < 300


def test_8_calibration_anchors(verdict):
    with verdict(8, "cost model anchors within 10%") as v:
        pre = DEFAULT_COSTS.pre_ms(2048)
        load = DEFAULT_COSTS.load_ms(kv_cache_bytes(REFERENCE_MODEL, 15000))
        rank = DEFAULT_COSTS.rank_ms(64, 2048)
        v.detail = f"pre(2048)={pre:.2f} ms, load(15K)={load:.2f} ms, rank(2048 items)={rank:.2f} ms"
        assert 35 * 0.9 <= pre <= 35 * 1.1
        assert load <= 20 * 1.1 and load <= 20
        assert rank <= 10


def test_9_determinism(verdict, tmp_path):
    with verdict(9, "two identical simulate runs give byte-identical CSVs") as v:
        args = ["simulate", "-c", str(CONFIGS / "default.ini"), "--set", "workload.horizon_s=5",
                "--set", "sim.mode=relay+dram", "--dram-hit-target", "0.5"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        names = sorted(p.name for p in a.glob("*.csv"))
        assert names == ["histograms.csv", "outcomes.csv", "summary.csv", "trace.csv"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        v.detail = f"{len(names)} CSVs, {sum((a / n).stat().st_size for n in names)} bytes"
