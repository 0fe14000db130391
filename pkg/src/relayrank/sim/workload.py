"""Query traces: a finite user population with long-tailed behaviour lengths.

Each user has stable lengths (long-term prefix, short-term suffix). A query
is one trip through the cascade; its retrieval and pre-processing delays are
drawn per query. Arrivals are either open-loop Poisson at ``offered_qps`` or
driven by ``clients`` closed-loop clients (see :mod:`relayrank.sim.engine`).

Repeat trials: with probability ``p_refresh`` a query spawns a follow-up for
the same user after an exponential gap, which is what makes the DRAM tier
useful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class WorkloadConfig:
    offered_qps: float = 100.0
    horizon_s: float = 60.0
    n_users: int = 5000
    long_fraction: float = 0.06
    short_len: tuple = (128, 2048)
    long_len: tuple = (2049, 8192)
    fixed_long_len: int | None = None
    suffix_len: tuple = (16, 64)
    items: int = 512
    feature_dim: int = 256
    p_refresh: float = 0.0
    refresh_gap_s: float = 5.0
    clients: int = 0
    retrieval_slack_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.offered_qps > 0:
            raise ConfigError("offered_qps must be > 0")
        if not self.horizon_s > 0:
            raise ConfigError("horizon_s must be > 0")
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        for name in ("long_fraction", "p_refresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("short_len", "long_len", "suffix_len"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must be 0 <= lo <= hi")
        if self.items < 1:
            raise ConfigError("items must be >= 1")
        if self.clients < 0 or self.retrieval_slack_ms < 0:
            raise ConfigError("clients and retrieval_slack_ms must be nonnegative")


@dataclass(frozen=True)
class UserProfiles:
    keys: tuple
    prefix_len: np.ndarray
    suffix_len: np.ndarray
    is_long: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)


def make_users(cfg: WorkloadConfig) -> UserProfiles:
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.n_users
    is_long = rng.random(n) < cfg.long_fraction
    # Log-uniform lengths give the long tail inside each class.
    def loguniform(lo, hi, size):
        lo = max(lo, 1)
        return np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1), size))).astype(np.int64).clip(lo, hi)
    short = loguniform(*cfg.short_len, n)
    long = (np.full(n, cfg.fixed_long_len, dtype=np.int64) if cfg.fixed_long_len is not None
            else loguniform(*cfg.long_len, n))
    prefix = np.where(is_long, long, short)
    suffix = rng.integers(cfg.suffix_len[0], cfg.suffix_len[1] + 1, n)
    keys = tuple(f"user-{i:06d}" for i in range(n))
    return UserProfiles(keys, prefix, suffix, is_long)


@dataclass(frozen=True)
class Query:
    qid: int
    t0_us: int
    user: int
    retrieval_us: int
    preprocess_us: int
    repeat: bool = False


class QuerySource:
    """Deterministic stream of users and stage delays, one RNG per stream."""

    def __init__(self, cfg: WorkloadConfig, users: UserProfiles, costs):
        self.cfg = cfg
        self.users = users
        self.costs = costs
        self._rng_user = np.random.default_rng([cfg.seed, 2])
        self._rng_delay = np.random.default_rng([cfg.seed, 3])
        self._rng_refresh = np.random.default_rng([cfg.seed, 4])
        self._next_id = 0

    def draw_user(self) -> int:
        return int(self._rng_user.integers(len(self.users)))

    def delays(self) -> tuple[int, int]:
        lo, hi = self.costs.retrieval_ms
        r = self.cfg.retrieval_slack_ms + self._rng_delay.uniform(lo, hi)
        lo, hi = self.costs.preprocess_ms
        p = self._rng_delay.uniform(lo, hi)
        return int(np.ceil(r * 1000)), int(np.ceil(p * 1000))

    def make(self, t0_us: int, user: int | None = None, repeat: bool = False) -> Query:
        user = self.draw_user() if user is None else user
        r, p = self.delays()
        q = Query(self._next_id, int(t0_us), user, r, p, repeat)
        self._next_id += 1
        return q

    def refresh_after(self) -> int | None:
        """Gap before this query's user comes back, or None."""
        if self.cfg.p_refresh <= 0 or self._rng_refresh.random() >= self.cfg.p_refresh:
            return None
        return int(np.ceil(self._rng_refresh.exponential(self.cfg.refresh_gap_s) * 1e6)) + 1

    def poisson_arrivals(self) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 5])
        horizon_us = self.cfg.horizon_s * 1e6
        n_expected = int(self.cfg.offered_qps * self.cfg.horizon_s)
        gaps = rng.exponential(1e6 / self.cfg.offered_qps, size=n_expected + 10 * int(np.sqrt(n_expected) + 10))
        times = np.cumsum(gaps)
        return np.ceil(times[times < horizon_us]).astype(np.int64)
