"""Capacity searches and parameter sweeps built on :func:`relayrank.sim.engine.run`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from ..errors import ConfigError
from .engine import Mode, SimReport, SloConfig, SystemConfig, run
from .workload import WorkloadConfig

logger = logging.getLogger(__name__)


def _feasible(report: SimReport) -> bool:
    return report.slo_met and report.scoped > 0


def find_max_seq(system: SystemConfig, workload: WorkloadConfig, slo: SloConfig = SloConfig(),
                 mode: Mode | str = Mode.RELAY, *, lo: int = 1, hi: int = 32768, step: int = 32,
                 seed: int | None = None, dram_hit_target: float = 0.0) -> int:
    """Largest long-sequence length whose run meets the SLO, or 0.

    Every long user gets exactly ``n`` prefix tokens; feasibility is assumed
    monotone in ``n`` and bisected down to ``step`` tokens.
    """
    if lo < 1 or hi < lo or step < 1:
        raise ConfigError("need 1 <= lo <= hi and step >= 1")
    cache: dict[int, bool] = {}

    def ok(n: int) -> bool:
        if n not in cache:
            w = replace(workload, fixed_long_len=n)
            cache[n] = _feasible(run(system, w, slo, mode, seed, dram_hit_target=dram_hit_target,
                                     audit=False, trace=False))
            logger.debug("find_max_seq %s n=%d -> %s", Mode(mode).value, n, cache[n])
        return cache[n]

    if not ok(lo):
        return 0
    if ok(hi):
        return hi
    good, bad = lo, hi
    while bad - good > step:
        mid = (good + bad) // 2
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


def slo_compliant_qps(system: SystemConfig, workload: WorkloadConfig, slo: SloConfig = SloConfig(),
                      mode: Mode | str = Mode.RELAY, *, start: float = 10.0, limit: float = 10_000.0,
                      growth: float = 2.0, rel_tol: float = 0.05, seed: int | None = None,
                      dram_hit_target: float = 0.0) -> float:
    """Largest offered QPS meeting the SLO: geometric ramp, then bisection."""
    if not 0 < start <= limit or growth <= 1 or rel_tol <= 0:
        raise ConfigError("need 0 < start <= limit, growth > 1, rel_tol > 0")

    def ok(qps: float) -> bool:
        w = replace(workload, offered_qps=qps)
        return _feasible(run(system, w, slo, mode, seed, dram_hit_target=dram_hit_target,
                             audit=False, trace=False))

    if not ok(start):
        return 0.0
    good = start
    bad = None
    while good < limit:
        nxt = min(good * growth, limit)
        if ok(nxt):
            good = nxt
        else:
            bad = nxt
            break
    if bad is None:
        return good
    while (bad - good) / good > rel_tol:
        mid = round((good + bad) / 2, 3)
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


SWEEPABLE = ("concurrency", "seq_len", "items", "dim", "layers", "retrieval_slack_ms",
             "dram_hit_target", "offered_qps", "long_fraction", "m_slots", "max_reloads")


@dataclass(frozen=True)
class Point:
    system: SystemConfig
    workload: WorkloadConfig
    dram_hit_target: float


def apply_knob(name: str, value, system: SystemConfig, workload: WorkloadConfig,
               dram_hit_target: float = 0.0) -> Point:
    if name == "concurrency":
        workload = replace(workload, clients=int(value))
    elif name == "seq_len":
        workload = replace(workload, fixed_long_len=int(value))
    elif name == "items":
        workload = replace(workload, items=int(value))
    elif name == "dim":
        system = system.with_shape(dim=int(value))
    elif name == "layers":
        system = system.with_shape(layers=int(value))
    elif name == "retrieval_slack_ms":
        workload = replace(workload, retrieval_slack_ms=float(value))
    elif name == "dram_hit_target":
        dram_hit_target = float(value)
    elif name == "offered_qps":
        workload = replace(workload, offered_qps=float(value))
    elif name == "long_fraction":
        workload = replace(workload, long_fraction=float(value))
    elif name == "m_slots":
        system = replace(system, trigger=replace(system.trigger, m_slots=int(value)))
    elif name == "max_reloads":
        system = replace(system, max_reloads=int(value))
    else:
        raise ConfigError(f"unknown sweep parameter {name!r}; choose from {', '.join(SWEEPABLE)}")
    return Point(system, workload, dram_hit_target)


MEASURES = ("run", "max_qps", "max_seq")


def sweep(param: str, values, system: SystemConfig, workload: WorkloadConfig,
          slo: SloConfig = SloConfig(), modes=(Mode.RELAY,), *, measure: str = "run",
          seed: int | None = None, dram_hit_target: float = 0.0, search: dict | None = None) -> list[dict]:
    """One row per (value, mode).

    ``measure="run"`` reports a single simulation; ``"max_qps"`` adds the
    SLO-compliant QPS and ``"max_seq"`` the longest feasible sequence, each
    next to the run at the configured load.
    """
    if param not in SWEEPABLE:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEPABLE)}")
    if measure not in MEASURES:
        raise ConfigError(f"unknown measure {measure!r}; choose from {', '.join(MEASURES)}")
    search = search or {}
    rows = []
    for value in values:
        point = apply_knob(param, value, system, workload, dram_hit_target)
        for mode in modes:
            mode = Mode(mode)
            report = run(point.system, point.workload, slo, mode, seed,
                         dram_hit_target=point.dram_hit_target, audit=False, trace=False)
            row = {"param": param, "value": value, **report.summary(),
                   "p99_wait_ms": round(report.p99_ms["wait"], 3),
                   "p99_load_ms": round(report.p99_ms["load"], 3),
                   "mean_rank_ms": round(report.mean_ms["rank"], 3)}
            if measure == "max_qps":
                row["slo_compliant_qps"] = slo_compliant_qps(
                    point.system, point.workload, slo, mode, seed=seed,
                    dram_hit_target=point.dram_hit_target, **search)
            elif measure == "max_seq":
                row["max_seq_len"] = find_max_seq(
                    point.system, point.workload, slo, mode, seed=seed,
                    dram_hit_target=point.dram_hit_target, **search)
            rows.append(row)
    return rows
