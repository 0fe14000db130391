"""Sequence-aware admission: risk test, capacity plan, live-cache accounting.

The trigger looks only at behaviour metadata. Low-risk requests cost nothing:
no bookkeeping and no emitted request. At-risk requests are admitted against
two per-instance budgets:

* live caches: ``live + 1 <= l_max`` with ``l_max = floor(r1 * hbm / kv_p99)``
* admission rate: admissions in the trailing ``t_life`` window, including the
  new one, may not exceed ``q_admit_max * t_life``

An admission whose cache is already resident on the instance (``reuse=True``)
needs no pre-inference compute, so it is charged to the live budget only.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction

from .errors import AccountingError, ConfigError, ProtocolError
from .router import Request

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BehaviorMetadata:
    user_key: str
    prefix_len: int
    feature_dim: int = 256

    def __post_init__(self):
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclass(frozen=True)
class TriggerConfig:
    length_threshold: int = 4096
    dim_threshold: int = 1024
    kv_p99: int = 100_000_000
    hbm_bytes: int = 32_000_000_000
    r1: float = 0.5
    q_m: float = 30.0
    m_slots: int = 5
    n_instances: int = 100
    r2: float = 0.1
    t_life: float = 0.4

    def __post_init__(self):
        for name in ("r1", "r2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        for name in ("kv_p99", "hbm_bytes", "q_m", "m_slots", "n_instances",
                     "length_threshold", "dim_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not self.t_life > 0:
            raise ConfigError(f"t_life must be > 0, got {self.t_life}")


def _exact(x) -> Fraction:
    # repr() round-trips the decimal the user wrote, so 0.1 stays 1/10.
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


class Binding(str, enum.Enum):
    HBM = "hbm"
    COMPUTE = "compute"


@dataclass(frozen=True)
class CapacityPlan:
    l_max: int
    q_admit_max: float
    q_max: float
    binding_constraint: Binding
    special_instances: int

    def as_dict(self) -> dict:
        return {
            "l_max": self.l_max,
            "q_admit_max": self.q_admit_max,
            "q_max": self.q_max,
            "binding_constraint": self.binding_constraint.value,
            "special_instances": self.special_instances,
        }


def is_at_risk(meta: BehaviorMetadata, cfg: TriggerConfig) -> bool:
    """True when the prefix is longer, or the features wider, than configured."""
    return meta.prefix_len > cfg.length_threshold or meta.feature_dim > cfg.dim_threshold


def compute_capacity_plan(cfg: TriggerConfig) -> CapacityPlan:
    if cfg.kv_p99 <= 0:
        raise ConfigError("kv_p99 must be > 0")
    l_max = math.floor(_exact(cfg.r1) * _exact(cfg.hbm_bytes) / _exact(cfg.kv_p99))
    window_rate = Fraction(l_max) / _exact(cfg.t_life)
    compute_rate = _exact(cfg.q_m) * cfg.m_slots
    binding = Binding.HBM if window_rate < compute_rate else Binding.COMPUTE
    specials = math.floor(_exact(cfg.r2) * cfg.n_instances)
    return CapacityPlan(
        l_max=l_max,
        q_admit_max=float(min(window_rate, compute_rate)),
        q_max=float(compute_rate * specials),
        binding_constraint=binding,
        special_instances=specials,
    )


def q_m_from_latency(pre_ms: float) -> int:
    """Per-slot pre-inference throughput implied by a per-request latency."""
    return math.floor(1000.0 / pre_ms) if pre_ms > 0 else 0


class RejectReason(str, enum.Enum):
    HBM_BUDGET = "hbm_budget"
    RATE_BUDGET = "rate_budget"
    ALREADY_LIVE = "already_live"


@dataclass(frozen=True)
class Admitted:
    request: Request


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason


class AdmissionState:
    """Per special instance admission counters.

    Callers serialise access per instance; the check-then-update in
    :meth:`try_admit` is not safe to interleave.
    """

    def __init__(self, cfg: TriggerConfig, plan: CapacityPlan | None = None,
                 ticks_per_second: int = 1):
        self.cfg = cfg
        self.plan = plan or compute_capacity_plan(cfg)
        self.live: dict[str, float] = {}
        self.window: deque[float] = deque()
        self.clock = 0
        self.reused = 0
        # Integer clocks (e.g. microseconds) get an integer window width, so
        # boundary comparisons are exact.
        self.width = cfg.t_life if ticks_per_second == 1 else round(cfg.t_life * ticks_per_second)
        # Tolerance keeps float products such as (l_max / t) * t from dropping below l_max.
        self._window_budget = self.plan.q_admit_max * cfg.t_life * (1 + 1e-12)

    @property
    def live_count(self) -> int:
        return len(self.live)

    @property
    def admitted_in_window(self) -> int:
        return len(self.window)

    def _advance(self, now: float) -> None:
        self.clock = max(self.clock, now)
        horizon = now - self.width
        while self.window and self.window[0] <= horizon:
            self.window.popleft()

    def try_admit(self, meta: BehaviorMetadata, now: float, reuse: bool = False) -> Admitted | Rejected:
        self._advance(now)
        if meta.user_key in self.live:
            return Rejected(RejectReason.ALREADY_LIVE)
        if self.live_count + 1 > self.plan.l_max:
            return Rejected(RejectReason.HBM_BUDGET)
        if not reuse and len(self.window) + 1 > self._window_budget:
            return Rejected(RejectReason.RATE_BUDGET)
        self.live[meta.user_key] = now
        if reuse:
            self.reused += 1
        else:
            self.window.append(now)
        return Admitted(Request.pre_infer(meta.user_key))

    def release(self, user_key: str) -> None:
        if user_key not in self.live:
            raise AccountingError(f"release of {user_key!r}, which is not live")
        del self.live[user_key]

    def expire(self, now: float) -> list[str]:
        """Release admissions older than ``t_life``; returns their keys."""
        self._advance(now)
        stale = [k for k, t in self.live.items() if t + self.width <= now]
        for key in stale:
            del self.live[key]
        return stale


def try_admit(state: AdmissionState, cfg: TriggerConfig, meta: BehaviorMetadata,
              now: float) -> Admitted | Rejected:
    if cfg != state.cfg:
        raise ConfigError("admission state was built for a different trigger config")
    if not is_at_risk(meta, cfg):
        raise ProtocolError(f"{meta.user_key!r} is not at risk; the trigger must not admit it")
    return state.try_admit(meta, now)


def release(state: AdmissionState, user_key: str) -> None:
    state.release(user_key)
