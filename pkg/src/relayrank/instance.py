"""Ranking instances: M model slots serving pre-infer and rank requests.

A *special* instance owns an admission state, an HBM window and a DRAM store.
On ``pre-infer`` it computes (or reloads) the user's prefix cache; on
``rank`` it runs the pseudo pre-inference probe and then ranks on the cached
prefix, falling back to full inference on a miss. A *normal* instance only
runs full inference.

Instances are driven by an :class:`~relayrank.events.EventLoop`; ``handle``
starts work and the outcome is delivered when the work completes.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import ProtocolError, WindowFullError
from .events import EventLoop
from .model import (ModelConfig, PrefixCache, SegmentedSequence, full_infer, prefix_preinfer,
                    rank_with_cache)
from .router import Kind, Request, Stage
from .tiers import (AlreadyInHbm, DramHit, DramStore, Event, HbmHit, HbmWindow, Miss, ReloadGovernor,
                    ReloadScheduled, TieredCache, TraceLog)
from .trigger import AdmissionState, Admitted, BehaviorMetadata, Rejected, TriggerConfig

logger = logging.getLogger(__name__)


class Path(str, enum.Enum):
    PREINFER_DONE = "preinfer_done"
    RANK_CACHED_HBM = "rank_cached_hbm"
    RANK_CACHED_AFTER_RELOAD = "rank_cached_after_reload"
    RANK_FALLBACK_FULL = "rank_fallback_full"
    RANK_CACHED_REMOTE = "rank_cached_remote"
    RANK_FULL = "rank_full"


CACHED_PATHS = {Path.RANK_CACHED_HBM, Path.RANK_CACHED_AFTER_RELOAD, Path.RANK_CACHED_REMOTE}


@dataclass
class UserProfile:
    prefix_len: int
    suffix_len: int = 0
    sequence: SegmentedSequence | None = None


class BehaviorStore(Protocol):
    def profile(self, user_key: str) -> UserProfile: ...


class ToyBehaviorStore:
    """Materialised token sequences for scoring tests."""

    def __init__(self, config: ModelConfig, seed: int = 0, user_tokens: int = 2,
                 long_range=(8, 48), suffix_range=(0, 8)):
        self.config = config
        self.seed = seed
        self.user_tokens = user_tokens
        self.long_range = long_range
        self.suffix_range = suffix_range
        self._cache: dict[str, UserProfile] = {}

    def profile(self, user_key: str) -> UserProfile:
        prof = self._cache.get(user_key)
        if prof is None:
            # Per-user stream: stable regardless of lookup order.
            rng = np.random.default_rng([self.seed, *user_key.encode("utf-8")])
            n_long = int(rng.integers(*self.long_range))
            n_suffix = int(rng.integers(*self.suffix_range))
            d = self.config.dim
            seq = SegmentedSequence(rng.normal(size=(self.user_tokens, d)), rng.normal(size=(n_long, d)),
                                    rng.normal(size=(n_suffix, d)), np.zeros((0, d)))
            prof = self._cache[user_key] = UserProfile(self.user_tokens + n_long, n_suffix, seq)
        return prof

    def candidates(self, user_key: str, n: int, salt: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7, salt, *user_key.encode("utf-8")])
        return rng.normal(size=(n, self.config.dim))


@dataclass
class ServeOutcome:
    user_key: str
    path: Path
    instance_id: str
    arrived_at: int
    finished_at: int
    stage_latencies: dict
    scores: np.ndarray | None = None
    request: Request | None = None

    @property
    def latency(self) -> int:
        return self.finished_at - self.arrived_at


@dataclass(eq=False)
class _Ctx:
    req: Request
    arrived: int
    on_done: Callable | None
    lat: dict = field(default_factory=lambda: {"queue": 0, "wait": 0, "pre": 0, "load": 0, "rank": 0})
    waited_since: int | None = None
    reloaded: bool = False
    reload_failed: bool = False


@dataclass(eq=False)
class _Work:
    ctx: _Ctx
    start: Callable  # now -> (duration_us, finish_fn)
    is_rank: bool
    enqueued: int = 0


class RankingInstance:
    def __init__(self, instance_id: str, kind: Kind, loop: EventLoop, costs, model: ModelConfig,
                 m_slots: int = 5, *, trigger_cfg: TriggerConfig | None = None,
                 hbm_capacity: int | None = None, dram_capacity: int = 0,
                 dram_ttl_us: int | None = None, max_reloads: int = 2, spill: bool = True,
                 pcie_share: int = 1, trace: TraceLog | None = None,
                 store: BehaviorStore | None = None, score: bool = False,
                 rank_priority: bool = False, remote_directory: Callable | None = None,
                 server_id: str = ""):
        if m_slots < 1:
            raise ValueError("m_slots must be >= 1")
        self.instance_id = instance_id
        self.kind = Kind(kind)
        self.server_id = server_id
        self.loop = loop
        self.costs = costs
        self.model = model
        self.m_slots = m_slots
        self.store = store
        self.score = score
        self.rank_priority = rank_priority
        self.pcie_share = pcie_share
        self.remote_directory = remote_directory
        self.trace = trace if trace is not None else TraceLog()
        self.outcomes: list[ServeOutcome] = []
        self._queue: deque[_Work] = deque()
        self._rank_queue: deque[_Work] = deque()
        self.busy = 0
        self.max_busy = 0
        self.busy_us = 0
        self.started_work = 0

        self.trigger_cfg = trigger_cfg
        self.admission = None
        self.cache = None
        self._admitted_at: dict[str, int] = {}
        self._reloaded: set[str] = set()
        if self.kind is Kind.SPECIAL:
            trigger_cfg = trigger_cfg or TriggerConfig()
            self.trigger_cfg = trigger_cfg
            self.admission = AdmissionState(trigger_cfg, ticks_per_second=1_000_000)
            capacity = hbm_capacity if hbm_capacity is not None else int(trigger_cfg.r1 * trigger_cfg.hbm_bytes)
            self.t_life_us = round(trigger_cfg.t_life * 1e6)
            self.cache = TieredCache(
                instance_id, HbmWindow(capacity), DramStore(dram_capacity, dram_ttl_us),
                ReloadGovernor(max_reloads, getattr(costs, "reload_bandwidth", 14e9)),
                self.trace, spill_enabled=spill and dram_capacity > 0,
                on_release=self._release_admission,
            )

    # -- admission ----------------------------------------------------------

    def admit(self, meta: BehaviorMetadata, now: int | None = None) -> Admitted | Rejected:
        """Run the trigger's admission test against this instance's budgets.

        A user whose cache is already resident here (HBM or DRAM) is admitted
        as reuse: no pre-inference compute, so the rate budget is not charged.
        """
        now = self.loop.now if now is None else now
        reuse = self.resident(meta.user_key, now)
        result = self.admission.try_admit(meta, now, reuse=reuse)
        if isinstance(result, Admitted):
            self._admitted_at[meta.user_key] = now
            self.trace.log(now, self.instance_id, meta.user_key, Event.ADMIT, "", 0,
                           "reuse" if reuse else "compute")
            self.loop.at(now + self.t_life_us, self._expire, meta.user_key, now)
        return result

    def resident(self, user_key: str, now: int) -> bool:
        if self.cache.in_flight(user_key) is not None:
            return True
        return not isinstance(self.cache.lookup(user_key, now), Miss)

    def _expire(self, user_key: str, admitted_at: int) -> None:
        if self._admitted_at.get(user_key) != admitted_at:
            return
        now = self.loop.now
        self.cache.expire(user_key, now)
        self.trace.log(now, self.instance_id, user_key, Event.EXPIRE)
        self._release_admission(user_key, now)

    def _release_admission(self, user_key: str, now: int) -> None:
        if user_key in self.admission.live:
            self.admission.release(user_key)
            self._admitted_at.pop(user_key, None)
            self.trace.log(now, self.instance_id, user_key, Event.RELEASE)

    def _expiry_of(self, user_key: str) -> int | None:
        t = self._admitted_at.get(user_key)
        return None if t is None else t + self.t_life_us

    # -- request entry --------------------------------------------------------

    def handle(self, req: Request, now: int | None = None,
               on_done: Callable[[ServeOutcome], None] | None = None) -> None:
        req.validate()
        now = self.loop.now if now is None else now
        ctx = _Ctx(req, now, on_done)
        if self.kind is Kind.NORMAL:
            if req.stage is Stage.PRE_INFER:
                raise ProtocolError("pre-infer sent to a normal instance")
            self._enqueue(_Work(ctx, self._start_full(Path.RANK_FULL), True))
        elif req.stage is Stage.PRE_INFER:
            self._preinfer(ctx)
        else:
            self._rank(ctx)

    def _profile(self, user_key: str) -> UserProfile:
        if self.store is None:
            raise ProtocolError("instance has no behaviour store")
        return self.store.profile(user_key)

    # -- pre-inference --------------------------------------------------------

    def _preinfer(self, ctx: _Ctx) -> None:
        user = ctx.req.user_id
        now = self.loop.now
        if self.cache.in_flight(user) is not None:
            self._wait(ctx, self._preinfer)
            return
        if ctx.reload_failed:
            # No room to bring the spilled copy back; the rank will fall back.
            self._finish(ctx, Path.PREINFER_DONE)
            return
        hit = self.cache.lookup(user, now)
        if isinstance(hit, HbmHit):
            expires = self._expiry_of(user)
            if expires is not None:
                self.cache.arm(user, now, expires)
            self._finish(ctx, Path.PREINFER_DONE)
        elif isinstance(hit, DramHit):
            done_at = self.cache.begin_reload(user, now, self._reload_us(hit.cache.byte_size))
            ctx.lat["load"] += done_at - now
            self.loop.at(done_at, self._reload_done, user)
            self._wait(ctx, self._preinfer)
        else:
            self.cache.begin_compute(user, None)
            self._enqueue(_Work(ctx, self._start_compute, False))

    def _start_compute(self, ctx: _Ctx, now: int):
        prof = self._profile(ctx.req.user_id)
        duration = self.costs.contended(self.costs.pre_us(prof.prefix_len), self.busy)
        ctx.lat["pre"] = duration
        self.cache.flight(ctx.req.user_id).done_at = now + duration

        def finish():
            self._finish_compute(ctx, prof)
        return duration, finish

    def _finish_compute(self, ctx: _Ctx, prof: UserProfile) -> None:
        user = ctx.req.user_id
        now = self.loop.now
        if self.score and prof.sequence is not None:
            cache = prefix_preinfer(self.model, prof.sequence.user_info, prof.sequence.long_term,
                                    user, now)
        else:
            cache = PrefixCache.sized(user, prof.prefix_len, self.model, now)
        expires = self._expiry_of(user)
        try:
            self.cache.insert(cache, now, expires if expires is not None else now,
                              admitted=expires is not None)
        except WindowFullError:
            logger.warning("%s: no room for admitted cache of %s", self.instance_id, user)
        for waiter in self.cache.settle(user):
            waiter()
        self._finish(ctx, Path.PREINFER_DONE)

    # -- ranking ----------------------------------------------------------------

    def _rank(self, ctx: _Ctx) -> None:
        user = ctx.req.user_id
        now = self.loop.now
        if ctx.reload_failed:
            self._fallback(ctx)
            return
        probe = self.cache.pseudo_preinfer(user, now, self._reload_us)
        if isinstance(probe, ReloadScheduled):
            if probe.action.value == "reload":
                ctx.reloaded = True
            if probe.leader:
                ctx.lat["load"] += probe.done_at - now
                self.loop.at(probe.done_at, self._reload_done, user)
            self._wait(ctx, self._rank)
        elif isinstance(probe, AlreadyInHbm):
            self._enqueue(_Work(ctx, self._start_cached, True))
        else:
            found = self.remote_directory(user, self.instance_id) if self.remote_directory else None
            if found is not None:
                self._remote(ctx, found)
            else:
                self._fallback(ctx)

    def _fallback(self, ctx: _Ctx) -> None:
        self.trace.log(self.loop.now, self.instance_id, ctx.req.user_id, Event.MISS_FALLBACK)
        self._enqueue(_Work(ctx, self._start_full(Path.RANK_FALLBACK_FULL), True))

    def _remote(self, ctx: _Ctx, remote_cache: PrefixCache) -> None:
        now = self.loop.now
        delay = self.costs.remote_us(remote_cache.byte_size)
        self.trace.log(now, self.instance_id, ctx.req.user_id, Event.REMOTE_FETCH, "remote",
                       remote_cache.byte_size, remote_cache.state.value)
        ctx.lat["load"] += delay

        def arrived():
            self._enqueue(_Work(ctx, self._start_remote(remote_cache), True))
        self.loop.at(now + delay, arrived)

    def _start_remote(self, remote_cache: PrefixCache):
        def start(ctx: _Ctx, now: int):
            duration = self._rank_duration(ctx)

            def finish():
                self._finish(ctx, Path.RANK_CACHED_REMOTE, self._scores(ctx, remote_cache))
            return duration, finish
        return start

    def _rank_duration(self, ctx: _Ctx) -> int:
        prof = self._profile(ctx.req.user_id) if self.store is not None else UserProfile(0, 0)
        base = self.costs.rank_us(prof.suffix_len, ctx.req.n_items)
        return self.costs.contended(base, self.busy)

    def _start_cached(self, ctx: _Ctx, now: int):
        user = ctx.req.user_id
        entry = self.cache.window.get(user)
        if entry is None:
            # Evicted while queued for a slot.
            self.trace.log(now, self.instance_id, user, Event.MISS_FALLBACK)
            return self._start_full(Path.RANK_FALLBACK_FULL)(ctx, now)
        self.cache.mark_consumed(user, now)
        self._release_admission(user, now)
        cache = entry.cache
        duration = self._rank_duration(ctx)
        ctx.lat["rank"] = duration
        reloaded = ctx.reloaded or user in self._reloaded
        self._reloaded.discard(user)
        path = Path.RANK_CACHED_AFTER_RELOAD if reloaded else Path.RANK_CACHED_HBM
        scores = self._scores(ctx, cache)

        def finish():
            self._finish(ctx, path, scores)
        return duration, finish

    def _start_full(self, path: Path):
        def start(ctx: _Ctx, now: int):
            prof = self._profile(ctx.req.user_id) if self.store is not None else UserProfile(0, 0)
            n_total = prof.prefix_len + prof.suffix_len + ctx.req.n_items
            duration = self.costs.contended(self.costs.full_us(n_total), self.busy)
            ctx.lat["rank"] = duration
            scores = self._scores(ctx, None)

            def finish():
                self._finish(ctx, path, scores)
            return duration, finish
        return start

    def _scores(self, ctx: _Ctx, cache: PrefixCache | None):
        if not self.score:
            return None
        prof = self._profile(ctx.req.user_id)
        items = np.asarray(ctx.req.items, dtype=float)
        seq = prof.sequence
        if cache is not None and cache.per_layer_kv is not None:
            return rank_with_cache(self.model, cache, seq.suffix(self.model.dim), items)
        full = SegmentedSequence(seq.user_info, seq.long_term, seq.short_term, seq.cross_features, items)
        return full_infer(self.model, full)

    # -- reloads and waiting ------------------------------------------------------

    def _reload_us(self, nbytes: int) -> int:
        return self.costs.load_us(nbytes, self.pcie_share)

    def _reload_done(self, user_key: str) -> None:
        ok = self.cache.finish_reload(user_key, self.loop.now)
        if ok:
            self._reloaded.add(user_key)
        for waiter in self.cache.settle(user_key):
            waiter(ok)

    def _wait(self, ctx: _Ctx, resume: Callable[[_Ctx], None]) -> None:
        if ctx.waited_since is None:
            ctx.waited_since = self.loop.now

        def wake(ok: bool = True):
            ctx.lat["wait"] += self.loop.now - ctx.waited_since
            ctx.waited_since = None
            if not ok:
                ctx.reload_failed = True
            resume(ctx)
        self.cache.flight(ctx.req.user_id).waiters.append(wake)

    # -- slots --------------------------------------------------------------------

    def _enqueue(self, work: _Work) -> None:
        work.enqueued = self.loop.now
        if self.rank_priority and work.is_rank:
            self._rank_queue.append(work)
        else:
            self._queue.append(work)
        self._pump()

    def _next_work(self) -> _Work | None:
        if self._rank_queue:
            return self._rank_queue.popleft()
        if self._queue:
            return self._queue.popleft()
        return None

    def _pump(self) -> None:
        while self.busy < self.m_slots:
            work = self._next_work()
            if work is None:
                return
            now = self.loop.now
            work.ctx.lat["queue"] += now - work.enqueued
            self.busy += 1
            self.max_busy = max(self.max_busy, self.busy)
            self.started_work += 1
            duration, finish = work.start(work.ctx, now)
            self.busy_us += duration
            self.loop.at(now + duration, self._slot_done, finish)

    def _slot_done(self, finish: Callable[[], None]) -> None:
        self.busy -= 1
        finish()
        self._pump()

    def _finish(self, ctx: _Ctx, path: Path, scores=None) -> None:
        outcome = ServeOutcome(ctx.req.user_id, path, self.instance_id, ctx.arrived,
                               self.loop.now, dict(ctx.lat), scores, ctx.req)
        self.outcomes.append(outcome)
        if ctx.on_done is not None:
            ctx.on_done(outcome)

    def utilization(self, horizon_us: int) -> float:
        return self.busy_us / (self.m_slots * horizon_us) if horizon_us > 0 else 0.0


SpecialInstance = RankingInstance


def slot_schedule(m_slots: int, arrivals, durations):
    """FIFO start/finish times for work on ``m_slots`` identical slots.

    Returns ``(starts, finishes, queue_delays)`` as int64 arrays, in arrival
    order (ties keep input order).
    """
    from . import kernels

    arrivals = np.asarray(arrivals, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    order = np.argsort(arrivals, kind="stable")
    starts_sorted, finishes_sorted = kernels.fifo_slots(arrivals[order], durations[order], int(m_slots))
    starts = np.empty_like(starts_sorted)
    finishes = np.empty_like(finishes_sorted)
    starts[order] = starts_sorted
    finishes[order] = finishes_sorted
    return starts, finishes, starts - arrivals
