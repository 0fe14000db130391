"""Independent replay of a cache trace against the serving invariants.

The auditor rebuilds occupancy and admission counters from the trace alone
and reports every event that breaks one of:

* no remote fetch on a ranking path;
* HBM and DRAM occupancy within capacity;
* live caches within ``l_max``;
* compute admissions within ``q_admit_max * t_life`` over every window;
* no eviction of a live, unconsumed cache while its admission still holds.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..model import CacheState
from ..tiers import Event, TraceRecord


@dataclass
class AuditVerdict:
    events: int = 0
    remote_fetches: int = 0
    occupancy_violations: int = 0
    premature_evictions: int = 0
    rate_violations: int = 0
    live_violations: int = 0
    max_hbm_occupancy: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {
            "events": self.events, "remote_fetches": self.remote_fetches,
            "occupancy_violations": self.occupancy_violations,
            "premature_evictions": self.premature_evictions,
            "rate_violations": self.rate_violations, "live_violations": self.live_violations,
            "violations": [{"message": v["message"], "record": list(v["record"])} for v in self.violations],
        }

    def _flag(self, counter: str, message: str, record: TraceRecord) -> None:
        setattr(self, counter, getattr(self, counter) + 1)
        self.violations.append({"message": message, "record": record.row()})


def audit_trace(records, capacities: dict, trigger, plan) -> AuditVerdict:
    """``capacities`` maps instance id to ``(hbm_bytes, dram_bytes)``."""
    verdict = AuditVerdict(events=len(records))
    width = round(trigger.t_life * 1e6)
    budget = math.floor(plan.q_admit_max * trigger.t_life * (1 + 1e-12))
    ordered = sorted(records, key=lambda r: r.time_us)  # stable: keeps causal order within a tick

    hbm = defaultdict(int)
    dram = defaultdict(int)
    live = defaultdict(dict)          # instance -> user -> admit time
    admits = defaultdict(list)        # instance -> compute admission times

    for rec in ordered:
        inst, user, ev = rec.instance, rec.user_key, rec.event
        if ev is Event.REMOTE_FETCH:
            verdict._flag("remote_fetches", "remote fetch on a ranking path", rec)
        elif ev is Event.INSERT:
            (hbm if rec.tier == "hbm" else dram)[inst] += rec.bytes
        elif ev is Event.SPILL:
            hbm[inst] -= rec.bytes
            dram[inst] += rec.bytes
        elif ev is Event.RELOAD_END:
            dram[inst] -= rec.bytes
            hbm[inst] += rec.bytes
        elif ev is Event.EVICT:
            (hbm if rec.tier == "hbm" else dram)[inst] -= rec.bytes
            if rec.tier == "hbm" and rec.state == CacheState.LIVE.value:
                t = live[inst].get(user)
                if t is not None and rec.time_us < t + width:
                    verdict._flag("premature_evictions", "live cache evicted before its window closed", rec)
        elif ev is Event.ADMIT:
            live[inst][user] = rec.time_us
            if len(live[inst]) > plan.l_max:
                verdict._flag("live_violations", f"live caches exceed l_max={plan.l_max}", rec)
            if rec.state != "reuse":
                admits[inst].append(rec.time_us)
        elif ev is Event.RELEASE:
            live[inst].pop(user, None)

        cap = capacities.get(inst)
        if cap is not None:
            verdict.max_hbm_occupancy[inst] = max(verdict.max_hbm_occupancy.get(inst, 0), hbm[inst])
            if hbm[inst] > cap[0] or hbm[inst] < 0:
                verdict._flag("occupancy_violations", f"HBM occupancy {hbm[inst]} outside [0, {cap[0]}]", rec)
            if dram[inst] > cap[1] or dram[inst] < 0:
                verdict._flag("occupancy_violations", f"DRAM occupancy {dram[inst]} outside [0, {cap[1]}]", rec)

    for inst, times in admits.items():
        arr = np.asarray(times, dtype=np.int64)
        counts = kernels.window_counts(arr, width)
        for i in np.flatnonzero(counts > budget):
            rec = TraceRecord(int(arr[i]), inst, "", Event.ADMIT, "", 0, "compute")
            verdict._flag("rate_violations", f"{int(counts[i])} admissions in one window > {budget}", rec)
    return verdict


def audit_csv(stream, capacities: dict, trigger, plan) -> AuditVerdict:
    from ..tiers import TraceLog
    return audit_trace(TraceLog.read_csv(stream), capacities, trigger, plan)
