"""Discrete-event run of the cascade: retrieval -> pre-processing -> ranking.

Modes:

``baseline``
    Every ranking instance is normal and runs full inference at ranking.
``relay``
    The trigger admits at-risk users at retrieval time; their prefix is
    pre-inferred on the affinity owner while retrieval and pre-processing
    run, and ranking consumes it from HBM. No DRAM tier.
``relay+dram``
    As ``relay`` with the DRAM expander: consumed caches spill and later
    requests reload them instead of recomputing.
``remote``
    Ablation without rendezvous: pre-inference lands on any special
    instance and ranking fetches the cache across servers. The auditor
    flags every such fetch.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, InvariantViolation
from ..events import EventLoop, ms_to_us
from ..instance import Path, RankingInstance, ServeOutcome, UserProfile
from ..model import CacheState, ModelConfig, PrefixCache, kv_cache_bytes
from ..router import InstancePool, Kind, Policy, Request, route
from ..tiers import TraceLog
from ..trigger import (Admitted, BehaviorMetadata, Rejected, RejectReason, TriggerConfig,
                       compute_capacity_plan, is_at_risk, q_m_from_latency)
from .costs import DEFAULT_COSTS, REFERENCE_MODEL, CostModel
from .workload import QuerySource, UserProfiles, WorkloadConfig, make_users

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    RELAY = "relay"
    RELAY_DRAM = "relay+dram"
    REMOTE = "remote"

    @property
    def relays(self) -> bool:
        return self is not Mode.BASELINE


@dataclass(frozen=True)
class SloConfig:
    pipeline_p99_ms: float = 135.0
    ranking_ms: float = 50.0
    success_rate: float = 0.999
    scope: str = "long"           # long | all
    budget: str = "pipeline"      # pipeline | ranking

    def __post_init__(self):
        if self.ranking_ms > self.pipeline_p99_ms:
            raise ConfigError("ranking budget must not exceed the pipeline budget")
        if not 0.0 < self.success_rate <= 1.0:
            raise ConfigError("success_rate must lie in (0, 1]")
        if self.scope not in ("long", "all"):
            raise ConfigError(f"unknown SLO scope {self.scope!r}")
        if self.budget not in ("pipeline", "ranking"):
            raise ConfigError(f"unknown SLO budget {self.budget!r}")


@dataclass(frozen=True)
class SystemConfig:
    model: ModelConfig = REFERENCE_MODEL
    trigger: TriggerConfig = field(default_factory=lambda: TriggerConfig(
        length_threshold=2048, n_instances=20, r2=0.1))
    auto_kv_p99: bool = True
    auto_q_m: bool = True
    q_m_headroom: float = 0.8
    n_servers: int = 10
    vnodes: int = 128
    per_server_special_cap: int = 2
    policy: Policy = Policy.ROUND_ROBIN
    dram_bytes: int = 500_000_000_000
    dram_ttl_s: float | None = None
    max_reloads: int = 2
    spill: bool = True
    rank_priority: bool = False
    costs: CostModel = DEFAULT_COSTS
    churn_at_s: float | None = None

    def __post_init__(self):
        if self.n_servers < 1:
            raise ConfigError("n_servers must be >= 1")
        if self.dram_bytes < 0:
            raise ConfigError("dram_bytes must be >= 0")
        if not 0.0 < self.q_m_headroom <= 1.0:
            raise ConfigError("q_m_headroom must lie in (0, 1]")

    def with_shape(self, layers: int | None = None, dim: int | None = None) -> "SystemConfig":
        layers = self.model.layers if layers is None else layers
        dim = self.model.dim if dim is None else dim
        return replace(self, model=replace(self.model, layers=layers, dim=dim),
                       costs=self.costs.with_shape(layers, dim))


def resolve_trigger(system: SystemConfig, users: UserProfiles, dim: int) -> TriggerConfig:
    """Fill in ``kv_p99`` / ``q_m`` from the at-risk population when set to auto.

    Both are sized for the P99 at-risk prefix: the footprint it occupies and
    the pre-inference throughput one slot sustains at that length, derated by
    ``q_m_headroom`` so the slots are not planned at full utilisation.
    """
    cfg = system.trigger
    risky = np.array([n for n in users.prefix_len
                      if is_at_risk(BehaviorMetadata("", int(n), dim), cfg)], dtype=np.int64)
    pool = risky if len(risky) else users.prefix_len
    n99 = int(np.percentile(pool, 99, method="inverted_cdf"))
    if system.auto_kv_p99:
        cfg = replace(cfg, kv_p99=max(1, kv_cache_bytes(system.model, n99)))
    if system.auto_q_m:
        per_slot = q_m_from_latency(system.costs.pre_ms(n99) / system.q_m_headroom)
        cfg = replace(cfg, q_m=float(max(1, per_slot)))
    return cfg


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def p99(values) -> float:
    values = np.asarray(values)
    return float(np.percentile(values, 99, method="inverted_cdf")) if len(values) else 0.0


@dataclass
class SimReport:
    mode: str
    seed: int
    offered_qps: float
    horizon_s: float
    queries: int
    completed: int
    at_risk: int
    scoped: int
    success_rate: float
    slo_met: bool
    p99_ms: dict
    mean_ms: dict
    cache: dict
    paths: dict
    admission: dict
    utilization: dict
    audit: dict
    plan: dict
    throughput_qps: float
    max_in_flight: int
    histograms: dict = field(repr=False, default_factory=dict)

    def summary(self) -> dict:
        return {
            "mode": self.mode, "seed": self.seed, "offered_qps": self.offered_qps,
            "queries": self.queries, "completed": self.completed, "at_risk": self.at_risk,
            "scoped": self.scoped,
            "success_rate": round(self.success_rate, 6), "slo_met": self.slo_met,
            "p99_e2e_ms": round(self.p99_ms["e2e"], 3), "p99_rank_ms": round(self.p99_ms["rank"], 3),
            "throughput_qps": round(self.throughput_qps, 3),
            "dram_hit_rate": round(self.cache["dram_hit_rate"], 6),
            "special_utilization": round(self.utilization["special"], 6),
            "remote_fetches": self.audit["remote_fetches"],
            "violations": len(self.audit["violations"]),
        }


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


class _Store:
    def __init__(self, users: UserProfiles):
        self.users = users
        self.index = {k: i for i, k in enumerate(users.keys)}

    def profile(self, user_key: str) -> UserProfile:
        i = self.index[user_key]
        return UserProfile(int(self.users.prefix_len[i]), int(self.users.suffix_len[i]))


@dataclass
class _Record:
    qid: int
    user: int
    long: bool
    at_risk: bool
    t0: int
    rank_at: int
    keyed: bool
    repeat: bool
    done: int = -1
    path: str = ""
    stages: dict | None = None


class Simulation:
    def __init__(self, system: SystemConfig, workload: WorkloadConfig, slo: SloConfig,
                 mode: Mode | str, seed: int | None = None, dram_hit_target: float = 0.0,
                 trace: bool = True):
        self.mode = Mode(mode)
        if seed is not None:
            workload = replace(workload, seed=seed)
        if not 0.0 <= dram_hit_target <= 1.0:
            raise ConfigError("dram_hit_target must lie in [0, 1]")
        self.system, self.workload, self.slo = system, workload, slo
        self.dram_hit_target = dram_hit_target
        self.costs = system.costs
        self.loop = EventLoop()
        self.trace = TraceLog(enabled=trace)
        self.users = make_users(workload)
        self.store = _Store(self.users)
        self.trigger = resolve_trigger(system, self.users, system.model.dim)
        self.plan = compute_capacity_plan(self.trigger)
        self.source = QuerySource(workload, self.users, self.costs)
        self.records: list[_Record] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.horizon_us = int(round(workload.horizon_s * 1e6))
        self.admission_results = Counter()
        self._remote_rr = 0
        self._build_pool()

    # -- topology -----------------------------------------------------------

    def _build_pool(self) -> None:
        sysc = self.system
        n = self.trigger.n_instances
        n_special = self.plan.special_instances if self.mode.relays else 0
        if self.mode.relays and n_special == 0:
            logger.warning("r2 * N < 1: no special instances, every at-risk request falls back")
        self.pool = InstancePool.build(n, n_special, sysc.n_servers, sysc.per_server_special_cap,
                                       sysc.vnodes, sysc.policy)
        per_server = Counter(i.server_id for i in self.pool.instances if i.kind is Kind.SPECIAL)
        dram = sysc.dram_bytes if self.mode in (Mode.RELAY_DRAM,) else 0
        ttl = None if sysc.dram_ttl_s is None else int(round(sysc.dram_ttl_s * 1e6))
        self.instances: dict[str, RankingInstance] = {}
        for spec in self.pool.instances:
            share = per_server[spec.server_id] if sysc.costs.shared_bandwidth else 1
            inst = RankingInstance(
                spec.instance_id, spec.kind, self.loop, self.costs, sysc.model, self.trigger.m_slots,
                trigger_cfg=self.trigger, dram_capacity=dram, dram_ttl_us=ttl,
                max_reloads=sysc.max_reloads, spill=sysc.spill, pcie_share=max(1, share),
                trace=self.trace, store=self.store, rank_priority=sysc.rank_priority,
                remote_directory=self._remote_lookup if self.mode is Mode.REMOTE else None,
                server_id=spec.server_id)
            self.instances[spec.instance_id] = inst
        self.specials = [self.instances[i] for i in self.pool.special_ids]

    def _warm(self) -> None:
        if self.mode is not Mode.RELAY_DRAM or self.dram_hit_target <= 0 or not self.specials:
            return
        rng = np.random.default_rng([self.workload.seed, 6])
        chosen = rng.random(len(self.users)) < self.dram_hit_target
        for i, key in enumerate(self.users.keys):
            if not chosen[i] or not self._at_risk(i):
                continue
            inst = self.instances[self.pool.owner(key)]
            inst.cache.warm(PrefixCache.sized(key, int(self.users.prefix_len[i]), self.system.model), 0)

    def _remote_lookup(self, user_key: str, me: str):
        for inst in self.specials:
            if inst.instance_id == me:
                continue
            entry = inst.cache.window.get(user_key)
            if entry is not None and entry.cache.state is CacheState.LIVE:
                inst.cache.mark_consumed(user_key, self.loop.now)
                return entry.cache
        return None

    def _churn(self) -> None:
        if len(self.pool.special_ids) > 1:
            victim = self.pool.special_ids[-1]
            self.pool = self.pool.remove_instance(victim)
            logger.info("churn: removed %s from the ring at %d us", victim, self.loop.now)

    # -- query flow -----------------------------------------------------------

    def _at_risk(self, i: int) -> bool:
        meta = BehaviorMetadata(self.users.keys[i], int(self.users.prefix_len[i]), self.system.model.dim)
        return is_at_risk(meta, self.trigger)

    def _start_query(self, repeat_user: int | None = None) -> None:
        now = self.loop.now
        q = self.source.make(now, repeat_user, repeat=repeat_user is not None)
        key = self.users.keys[q.user]
        at_risk = self._at_risk(q.user)
        keyed = False
        if self.mode.relays and at_risk and self.pool.special_ids:
            meta = BehaviorMetadata(key, int(self.users.prefix_len[q.user]), self.system.model.dim)
            if self.mode is Mode.REMOTE:
                producer = self.instances[self.pool.special_ids[self._remote_rr % len(self.pool.special_ids)]]
                self._remote_rr += 1
            else:
                producer = self.instances[self.pool.owner(key)]
            result = producer.admit(meta, now)
            self.admission_results[result.reason.value if isinstance(result, Rejected) else "admitted"] += 1
            if isinstance(result, Admitted):
                keyed = True
                self.loop.at(now + ms_to_us(self.costs.trigger_ms), self._send_preinfer,
                             result.request, producer)
            elif result.reason is RejectReason.ALREADY_LIVE:
                keyed = True
        rec = _Record(q.qid, q.user, bool(self.users.is_long[q.user]), at_risk, now, now + q.retrieval_us + q.preprocess_us, keyed, q.repeat)
        self.records.append(rec)
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        self.loop.at(rec.rank_at, self._send_rank, rec)
        gap = self.source.refresh_after()
        if gap is not None and now + gap < self.horizon_us:
            self.loop.at(now + gap, self._start_query, q.user)

    def _send_preinfer(self, req: Request, producer: RankingInstance) -> None:
        if self.mode is Mode.REMOTE:
            producer.handle(req)
            return
        decision = route(self.pool, req)
        self.instances[decision.instance_id].handle(req)

    def _send_rank(self, rec: _Record) -> None:
        key = self.users.keys[rec.user]
        req = Request.rank(key, range(self.workload.items), rec.keyed)
        decision = route(self.pool, req)
        self.pool.connections[decision.instance_id] += 1

        def done(outcome: ServeOutcome, rec=rec, target=decision.instance_id):
            self.pool.connections[target] -= 1
            rec.done = outcome.finished_at
            rec.path = outcome.path.value
            rec.stages = outcome.stage_latencies
            self.in_flight -= 1
            if self.workload.clients and self.loop.now < self.horizon_us:
                self._start_query()

        self.instances[decision.instance_id].handle(req, on_done=done)

    # -- driver -------------------------------------------------------------------

    def run(self, audit: bool = True, strict: bool = False) -> SimReport:
        self._warm()
        if self.workload.clients:
            for _ in range(self.workload.clients):
                self.loop.at(0, self._start_query)
        else:
            for t in self.source.poisson_arrivals():
                self.loop.at(int(t), self._start_query)
        if self.system.churn_at_s is not None:
            self.loop.at(int(round(self.system.churn_at_s * 1e6)), self._churn)
        self.loop.run()
        verdict = None
        if audit:
            from .audit import audit_trace
            verdict = audit_trace(self.trace.records, self.instance_capacities(), self.trigger, self.plan)
            if strict and verdict.violations:
                raise InvariantViolation(verdict.violations[0]["message"], verdict.violations[0]["record"])
        return self._report(verdict)

    def instance_capacities(self) -> dict:
        return {i.instance_id: (i.cache.window.capacity_bytes, i.cache.dram.capacity_bytes)
                for i in self.instances.values() if i.cache is not None}

    def _report(self, verdict) -> SimReport:
        recs = [r for r in self.records if r.done >= 0]
        slo = self.slo
        scoped = [r for r in recs if r.long] if slo.scope == "long" else recs
        e2e = np.array([r.done - r.t0 for r in scoped], dtype=np.int64) / 1000.0
        rank = np.array([r.done - r.rank_at for r in scoped], dtype=np.int64) / 1000.0
        ok_rank = rank <= slo.ranking_ms
        ok = ok_rank if slo.budget == "ranking" else ok_rank & (e2e <= slo.pipeline_p99_ms)
        success = float(ok.mean()) if len(ok) else 1.0
        p99s = {"e2e": p99(e2e), "rank": p99(rank)}
        for stage in ("queue", "wait", "pre", "load"):
            p99s[stage] = p99([r.stages[stage] / 1000.0 for r in scoped])
        slo_met = success >= slo.success_rate and p99s["rank"] <= slo.ranking_ms
        if slo.budget == "pipeline":
            slo_met = slo_met and p99s["e2e"] <= slo.pipeline_p99_ms

        paths = Counter(r.path for r in recs)
        ranks = len(recs)
        hbm_hits = paths[Path.RANK_CACHED_HBM.value]
        dram_hits = paths[Path.RANK_CACHED_AFTER_RELOAD.value]
        remote_hits = paths[Path.RANK_CACHED_REMOTE.value]
        at_risk_ranks = sum(1 for r in recs if r.at_risk)
        tstats = Counter()
        for inst in self.specials:
            tstats.update(inst.cache.stats)
        cache = {
            "hbm_hits": hbm_hits, "dram_hits": dram_hits, "remote_hits": remote_hits,
            "misses": ranks - hbm_hits - dram_hits - remote_hits,
            "reloads": tstats["reloads"], "evictions": tstats["evictions"], "spills": tstats["spills"],
            "dram_evictions": tstats["dram_evictions"],
            "dram_hit_rate": dram_hits / at_risk_ranks if at_risk_ranks else 0.0,
            "hbm_hit_rate": hbm_hits / at_risk_ranks if at_risk_ranks else 0.0,
        }
        last = max([r.done for r in recs], default=0)
        span = max(self.horizon_us, last)
        normals = [i for i in self.instances.values() if i.kind is Kind.NORMAL]
        util = {
            "special": float(np.mean([i.utilization(span) for i in self.specials])) if self.specials else 0.0,
            "normal": float(np.mean([i.utilization(span) for i in normals])) if normals else 0.0,
            "max_busy_slots": max((i.max_busy for i in self.instances.values()), default=0),
        }
        hist = {
            "e2e": _histogram(e2e), "rank": _histogram(rank),
        }
        return SimReport(
            mode=self.mode.value, seed=self.workload.seed, offered_qps=self.workload.offered_qps,
            horizon_s=self.workload.horizon_s, queries=len(self.records), completed=len(recs),
            at_risk=at_risk_ranks, scoped=len(scoped),
            success_rate=success, slo_met=bool(slo_met), p99_ms=p99s,
            mean_ms={"e2e": float(e2e.mean()) if len(e2e) else 0.0,
                     "rank": float(rank.mean()) if len(rank) else 0.0},
            cache=cache, paths=dict(sorted(paths.items())),
            admission=dict(sorted(self.admission_results.items())),
            utilization=util,
            audit=verdict.as_dict() if verdict is not None else {"remote_fetches": 0, "violations": []},
            plan={**self.plan.as_dict(), "kv_p99": self.trigger.kv_p99, "q_m": self.trigger.q_m},
            throughput_qps=len(recs) / (span / 1e6) if span else 0.0,
            max_in_flight=self.max_in_flight,
            histograms=hist,
        )


def _histogram(values_ms: np.ndarray, width_ms: float = 1.0) -> list[tuple[float, int]]:
    if not len(values_ms):
        return []
    bins = np.floor(values_ms / width_ms).astype(np.int64)
    counts = np.bincount(bins)
    return [(float(i * width_ms), int(c)) for i, c in enumerate(counts) if c]


def run(system: SystemConfig, workload: WorkloadConfig, slo: SloConfig = SloConfig(),
        mode: Mode | str = Mode.RELAY, seed: int | None = None, *, dram_hit_target: float = 0.0,
        audit: bool = True, strict: bool = False, trace: bool = True,
        return_sim: bool = False):
    """Simulate one configuration. Deterministic in ``(configs, mode, seed)``."""
    sim = Simulation(system, workload, slo, mode, seed, dram_hit_target, trace=trace or audit)
    report = sim.run(audit=audit, strict=strict)
    return (report, sim) if return_sim else report
