"""Two-tier lifecycle cache: a device (HBM) sliding window over a host (DRAM) store.

HBM holds caches for one request lifecycle. Eviction takes consumed entries
first (FIFO by consumption), then live entries whose lifecycle window has
expired, and never touches an unexpired live entry. Consumed victims are
spilled to DRAM when spilling is enabled; DRAM evicts least-recently-used.

All cache-affecting work for one user is single-flight: while a pre-inference
or a DRAM->HBM reload is in flight for a user, later requests for that user
join it instead of starting their own.

Time is integer microseconds throughout.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import AccountingError, LifecycleError, OversizeError, WindowFullError
from .model import CacheState, PrefixCache

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
TRACE_COLUMNS = ("time_us", "instance", "user_key", "event", "tier", "bytes", "state")


class Event(str, enum.Enum):
    INSERT = "insert"
    CONSUME = "consume"
    SPILL = "spill"
    RELOAD_START = "reload_start"
    RELOAD_END = "reload_end"
    RELOAD_FAILED = "reload_failed"
    EVICT = "evict"
    MISS_FALLBACK = "miss_fallback"
    ADMIT = "admit"
    RELEASE = "release"
    EXPIRE = "expire"
    INSERT_REJECTED = "insert_rejected"
    REMOTE_FETCH = "remote_fetch"


@dataclass(frozen=True)
class TraceRecord:
    time_us: int
    instance: str
    user_key: str
    event: Event
    tier: str
    bytes: int
    state: str

    def row(self) -> tuple:
        return (self.time_us, self.instance, self.user_key, self.event.value,
                self.tier, self.bytes, self.state)


class TraceLog:
    """Append-only cache event log; the auditor replays it."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[TraceRecord] = []

    def log(self, time_us, instance, user_key, event, tier="", nbytes=0, state="") -> None:
        if self.enabled:
            self.records.append(TraceRecord(int(time_us), instance, user_key, Event(event),
                                            tier, int(nbytes), state))

    def count(self, event: Event, **match) -> int:
        return sum(1 for r in self.records
                   if r.event is event and all(getattr(r, k) == v for k, v in match.items()))

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow(r.row())

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @staticmethod
    def read_csv(stream) -> list[TraceRecord]:
        reader = csv.DictReader(stream)
        return [TraceRecord(int(row["time_us"]), row["instance"], row["user_key"],
                            Event(row["event"]), row["tier"], int(row["bytes"]), row["state"])
                for row in reader]


# ---------------------------------------------------------------------------
# HBM sliding window
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class WindowEntry:
    cache: PrefixCache
    expires_at: int
    admitted: bool = False
    consumed_seq: int | None = None
    inserted_seq: int = 0

    def protected(self, now: int) -> bool:
        return self.cache.state is CacheState.LIVE and self.expires_at > now


class HbmWindow:
    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = int(capacity_bytes)
        self.entries: dict[str, WindowEntry] = {}
        self.occupancy_bytes = 0
        self._seq = itertools.count()

    def __contains__(self, user_key: str) -> bool:
        return user_key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, user_key: str) -> WindowEntry | None:
        return self.entries.get(user_key)

    def victims_for(self, nbytes: int, now: int) -> list[WindowEntry]:
        """Entries to evict so that ``nbytes`` more fit; raises if impossible."""
        if nbytes > self.capacity_bytes:
            raise OversizeError(f"{nbytes} B cache exceeds window capacity {self.capacity_bytes} B")
        need = self.occupancy_bytes + nbytes - self.capacity_bytes
        if need <= 0:
            return []
        consumed = sorted((e for e in self.entries.values() if e.cache.state is CacheState.CONSUMED),
                          key=lambda e: e.consumed_seq)
        expired = sorted((e for e in self.entries.values()
                          if e.cache.state is CacheState.LIVE and e.expires_at <= now),
                         key=lambda e: (e.expires_at, e.inserted_seq))
        chosen, freed = [], 0
        for entry in itertools.chain(consumed, expired):
            if freed >= need:
                break
            chosen.append(entry)
            freed += entry.cache.byte_size
        if freed < need:
            raise WindowFullError(f"need {need} B but only {freed} B evictable")
        return chosen

    def insert(self, cache: PrefixCache, now: int, expires_at: int,
               admitted: bool = False) -> list[WindowEntry]:
        """Insert ``cache``, evicting as needed. Returns the evicted entries."""
        if cache.user_key in self.entries:
            raise AccountingError(f"{cache.user_key!r} already resident in HBM")
        victims = self.victims_for(cache.byte_size, now)
        for victim in victims:
            self.remove(victim.cache.user_key)
        self.entries[cache.user_key] = WindowEntry(cache, expires_at, admitted,
                                                   inserted_seq=next(self._seq))
        self.occupancy_bytes += cache.byte_size
        return victims

    def remove(self, user_key: str) -> WindowEntry:
        entry = self.entries.pop(user_key)
        self.occupancy_bytes -= entry.cache.byte_size
        return entry

    def consume(self, user_key: str) -> bool:
        """Mark consumed; returns False if it already was."""
        entry = self.entries.get(user_key)
        if entry is None:
            raise AccountingError(f"consume of {user_key!r}, which is not in HBM")
        if entry.cache.state is CacheState.CONSUMED:
            return False
        entry.cache.transition(CacheState.CONSUMED)
        entry.consumed_seq = next(self._seq)
        return True


# ---------------------------------------------------------------------------
# DRAM expander store
# ---------------------------------------------------------------------------


class DramStore:
    """LRU host-memory tier. ``ttl_us=None`` means entries never go stale."""

    def __init__(self, capacity_bytes: int, ttl_us: int | None = None):
        self.capacity_bytes = int(capacity_bytes)
        self.ttl_us = ttl_us
        self.entries: OrderedDict[str, tuple[PrefixCache, int]] = OrderedDict()
        self.occupancy_bytes = 0

    def __contains__(self, user_key: str) -> bool:
        return user_key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def peek(self, user_key: str, now: int) -> PrefixCache | None:
        item = self.entries.get(user_key)
        if item is None:
            return None
        cache, stored_at = item
        if self.ttl_us is not None and stored_at + self.ttl_us <= now and cache.state is not CacheState.RELOADING:
            return None
        return cache

    def put(self, cache: PrefixCache, now: int) -> list[PrefixCache] | None:
        """Store a spilled cache; returns LRU victims, or None if it cannot fit at all."""
        if cache.byte_size > self.capacity_bytes:
            return None
        evicted = []
        for key in list(self.entries):
            if self.occupancy_bytes + cache.byte_size <= self.capacity_bytes:
                break
            victim = self.entries[key][0]
            if victim.state is CacheState.RELOADING:
                continue
            evicted.append(self.take(key))
        if self.occupancy_bytes + cache.byte_size > self.capacity_bytes:
            return None
        self.entries[cache.user_key] = (cache, now)
        self.occupancy_bytes += cache.byte_size
        return evicted

    def take(self, user_key: str) -> PrefixCache:
        cache, _ = self.entries.pop(user_key)
        self.occupancy_bytes -= cache.byte_size
        return cache

    def touch(self, user_key: str) -> None:
        self.entries.move_to_end(user_key)

    def drop_stale(self, now: int) -> list[PrefixCache]:
        if self.ttl_us is None:
            return []
        stale = [k for k, (c, t) in self.entries.items()
                 if t + self.ttl_us <= now and c.state is not CacheState.RELOADING]
        return [self.take(k) for k in stale]


class ReloadGovernor:
    """Bounded-concurrency reload calendar.

    Each lane is a reload channel; a reload starts on the lane that frees
    first, so at most ``max_concurrent_reloads`` overlap at any instant.
    """

    def __init__(self, max_concurrent_reloads: int = 2, reload_bandwidth: float = 14e9):
        if max_concurrent_reloads < 1:
            raise ValueError("need at least one reload lane")
        self.max_concurrent_reloads = max_concurrent_reloads
        self.reload_bandwidth = reload_bandwidth
        self.lanes = [0] * max_concurrent_reloads
        self.booked: list[tuple[int, int]] = []

    def reserve(self, now: int, duration: int) -> tuple[int, int]:
        lane = min(range(len(self.lanes)), key=lambda i: (self.lanes[i], i))
        start = max(now, self.lanes[lane])
        end = start + duration
        self.lanes[lane] = end
        self.booked.append((start, end))
        return start, end

    def current_reloads(self, t: int) -> int:
        return sum(1 for s, e in self.booked if s <= t < e)


# ---------------------------------------------------------------------------
# Per-user single flight
# ---------------------------------------------------------------------------


class Action(str, enum.Enum):
    PREINFER = "preinfer"
    RELOAD = "reload"


@dataclass
class UserFlightState:
    user_key: str
    in_flight: Action | None = None
    done_at: int | None = None
    waiters: list = field(default_factory=list)


@dataclass(frozen=True)
class HbmHit:
    entry: WindowEntry


@dataclass(frozen=True)
class DramHit:
    cache: PrefixCache


@dataclass(frozen=True)
class Miss:
    pass


@dataclass(frozen=True)
class AlreadyInHbm:
    entry: WindowEntry


@dataclass(frozen=True)
class ReloadScheduled:
    done_at: int
    leader: bool
    action: Action = Action.RELOAD


class TieredCache:
    """HBM window + DRAM store + flight table for one instance."""

    def __init__(self, instance_id: str, window: HbmWindow, dram: DramStore,
                 governor: ReloadGovernor, trace: TraceLog | None = None,
                 spill_enabled: bool = True,
                 on_release: Callable[[str, int], Any] | None = None):
        self.instance_id = instance_id
        self.window = window
        self.dram = dram
        self.governor = governor
        self.trace = trace if trace is not None else TraceLog()
        self.spill_enabled = spill_enabled
        self.on_release = on_release
        self.flights: dict[str, UserFlightState] = {}
        self.stats = {"reloads": 0, "evictions": 0, "spills": 0, "dram_evictions": 0}

    def _log(self, now, user, event, tier="", nbytes=0, state=""):
        self.trace.log(now, self.instance_id, user, event, tier, nbytes, state)

    # -- inspection -------------------------------------------------------

    def lookup(self, user_key: str, now: int) -> HbmHit | DramHit | Miss:
        entry = self.window.get(user_key)
        if entry is not None:
            return HbmHit(entry)
        cache = self.dram.peek(user_key, now)
        if cache is not None and cache.state is CacheState.SPILLED:
            return DramHit(cache)
        return Miss()

    def flight(self, user_key: str) -> UserFlightState:
        state = self.flights.get(user_key)
        if state is None:
            state = self.flights[user_key] = UserFlightState(user_key)
        return state

    def in_flight(self, user_key: str) -> UserFlightState | None:
        state = self.flights.get(user_key)
        return state if state is not None and state.in_flight is not None else None

    # -- mutation ---------------------------------------------------------

    def insert(self, cache: PrefixCache, now: int, expires_at: int, admitted: bool = False) -> None:
        """Insert into HBM, spilling or evicting victims. Raises WindowFullError."""
        if cache.user_key in self.dram:
            # The new HBM copy supersedes whatever the expander held.
            old = self.dram.take(cache.user_key)
            self._log(now, cache.user_key, Event.EVICT, "dram", old.byte_size, old.state.value)
        try:
            victims = self.window.insert(cache, now, expires_at, admitted)
        except WindowFullError:
            self._log(now, cache.user_key, Event.INSERT_REJECTED, "hbm", cache.byte_size, cache.state.value)
            raise
        for victim in victims:
            self._dispose(victim, now)
        self._log(now, cache.user_key, Event.INSERT, "hbm", cache.byte_size, cache.state.value)

    def _dispose(self, victim: WindowEntry, now: int) -> None:
        cache = victim.cache
        user = cache.user_key
        self.stats["evictions"] += 1
        spilled = (cache.state is CacheState.CONSUMED and self.spill_enabled
                   and self._to_dram(cache, now, from_hbm=True))
        if not spilled:
            state = cache.state.value
            cache.transition(CacheState.EVICTED)
            self._log(now, user, Event.EVICT, "hbm", cache.byte_size, state)
        # Log the eviction before the release so a trace replay sees it while admitted.
        if victim.admitted:
            victim.admitted = False
            self._release(user, now)

    def _to_dram(self, cache: PrefixCache, now: int, from_hbm: bool) -> bool:
        evicted = self.dram.put(cache, now)
        if evicted is None:
            return False
        for old in evicted:
            self.stats["dram_evictions"] += 1
            state = old.state.value
            old.transition(CacheState.EVICTED)
            self._log(now, old.user_key, Event.EVICT, "dram", old.byte_size, state)
        cache.transition(CacheState.SPILLED)
        if from_hbm:
            self.stats["spills"] += 1
            self._log(now, cache.user_key, Event.SPILL, "dram", cache.byte_size, CacheState.SPILLED.value)
        else:
            self._log(now, cache.user_key, Event.INSERT, "dram", cache.byte_size, CacheState.SPILLED.value)
        return True

    def spill(self, user_key: str, now: int) -> None:
        entry = self.window.get(user_key)
        if entry is None:
            raise AccountingError(f"spill of {user_key!r}, which is not in HBM")
        if entry.cache.state is not CacheState.CONSUMED:
            raise LifecycleError(f"cannot spill {user_key!r} in state {entry.cache.state.value}")
        self.window.remove(user_key)
        if not self._to_dram(entry.cache, now, from_hbm=True):
            entry.cache.transition(CacheState.EVICTED)
            self._log(now, user_key, Event.EVICT, "hbm", entry.cache.byte_size, CacheState.CONSUMED.value)

    def warm(self, cache: PrefixCache, now: int = 0) -> bool:
        """Seed the DRAM tier with a consumed cache (simulation warm start)."""
        if cache.state is CacheState.LIVE:
            cache.transition(CacheState.CONSUMED)
        return self._to_dram(cache, now, from_hbm=False)

    def arm(self, user_key: str, now: int, expires_at: int) -> None:
        """Bind a resident cache to a fresh admission."""
        entry = self.window.entries[user_key]
        if entry.cache.state is CacheState.CONSUMED:
            entry.cache.transition(CacheState.LIVE)
            entry.consumed_seq = None
        entry.expires_at = max(entry.expires_at, expires_at)
        entry.admitted = True

    def mark_consumed(self, user_key: str, now: int) -> bool:
        """Consume the HBM copy; idempotent. Returns True on the first consumption."""
        entry = self.window.get(user_key)
        if entry is None:
            raise AccountingError(f"consume of {user_key!r}, which is not in HBM")
        first = self.window.consume(user_key)
        if entry.admitted:
            entry.admitted = False
            self._release(user_key, now)
        if first:
            self._log(now, user_key, Event.CONSUME, "hbm", entry.cache.byte_size, CacheState.CONSUMED.value)
        return first

    def expire(self, user_key: str, now: int) -> None:
        """The admission's lifecycle window closed before consumption."""
        entry = self.window.get(user_key)
        if entry is not None and entry.admitted:
            entry.admitted = False

    def _release(self, user_key: str, now: int) -> None:
        if self.on_release is not None:
            self.on_release(user_key, now)

    # -- single flight ----------------------------------------------------

    def pseudo_preinfer(self, user_key: str, now: int,
                        reload_cost: Callable[[int], int]) -> AlreadyInHbm | ReloadScheduled | Miss:
        """Probe HBM then DRAM ahead of a rank; at most one reload per user in flight."""
        flight = self.in_flight(user_key)
        if flight is not None:
            return ReloadScheduled(flight.done_at, leader=False, action=flight.in_flight)
        hit = self.lookup(user_key, now)
        if isinstance(hit, HbmHit):
            return AlreadyInHbm(hit.entry)
        if isinstance(hit, DramHit):
            done_at = self.begin_reload(user_key, now, reload_cost(hit.cache.byte_size))
            return ReloadScheduled(done_at, leader=True)
        return Miss()

    def begin_reload(self, user_key: str, now: int, duration: int) -> int:
        cache = self.dram.peek(user_key, now)
        if cache is None or cache.state is not CacheState.SPILLED:
            raise AccountingError(f"reload of {user_key!r}, which is not spilled in DRAM")
        flight = self.flight(user_key)
        if flight.in_flight is not None:
            raise AccountingError(f"{user_key!r} already has {flight.in_flight.value} in flight")
        start, end = self.governor.reserve(now, duration)
        cache.transition(CacheState.RELOADING)
        self.dram.touch(user_key)
        flight.in_flight, flight.done_at = Action.RELOAD, end
        self.stats["reloads"] += 1
        self._log(start, user_key, Event.RELOAD_START, "dram", cache.byte_size, CacheState.RELOADING.value)
        return end

    def finish_reload(self, user_key: str, now: int) -> bool:
        """Move a reloaded cache from DRAM into HBM. False if HBM had no room."""
        cache = self.dram.peek(user_key, now)
        if cache is None or cache.state is not CacheState.RELOADING:
            raise AccountingError(f"finish_reload of {user_key!r} without a reload in progress")
        try:
            victims = self.window.victims_for(cache.byte_size, now)
        except WindowFullError:
            cache.transition(CacheState.SPILLED)
            self._log(now, user_key, Event.RELOAD_FAILED, "hbm", cache.byte_size, CacheState.SPILLED.value)
            return False
        self.dram.take(user_key)
        cache.transition(CacheState.CONSUMED)
        for victim in victims:
            self.window.remove(victim.cache.user_key)
            self._dispose(victim, now)
        self.window.insert(cache, now, expires_at=now)
        # Reloaded copies are consumable immediately and evictable FIFO from here.
        self.window.entries[user_key].consumed_seq = next(self.window._seq)
        self._log(now, user_key, Event.RELOAD_END, "hbm", cache.byte_size, CacheState.CONSUMED.value)
        return True

    def begin_compute(self, user_key: str, done_at: int) -> None:
        flight = self.flight(user_key)
        if flight.in_flight is not None:
            raise AccountingError(f"{user_key!r} already has {flight.in_flight.value} in flight")
        flight.in_flight, flight.done_at = Action.PREINFER, done_at

    def settle(self, user_key: str) -> list:
        """Clear the user's in-flight action and hand back its waiters."""
        flight = self.flights.pop(user_key, None)
        if flight is None:
            return []
        return flight.waiters
