"""A minimal causal-attention ranking backbone with prefix KV reuse.

The backbone is a stack of single-head causal self-attention blocks with
residual adds and a linear scoring head. Candidates are scored target-aware:
each candidate is an extra token that attends to every context token and to
itself, never to other candidates.

Two independent code paths compute scores:

* :func:`full_infer` builds the whole ``[context; candidates]`` sequence and
  runs dense masked attention in numpy. It is the reference.
* :func:`prefix_preinfer` + :func:`rank_with_cache` compute the long-term
  prefix once, keep its per-layer K/V, then extend it with the suffix and
  candidates through the kernels in :mod:`relayrank.kernels`.

Weights come from ``numpy.random.default_rng(seed)`` (PCG64), which is stable
across platforms. Arithmetic is float64 regardless of ``elem_bytes``; that
field only feeds the byte-size accounting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigError, LifecycleError, ShapeError, StaleCacheError


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 16
    elem_bytes: int = 8
    seed: int = 42

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.elem_bytes not in (4, 8):
            raise ConfigError(f"elem_bytes must be 4 or 8, got {self.elem_bytes}")

    @property
    def epsilon(self) -> float:
        """Score tolerance between cached and full inference."""
        return 1e-6 if self.elem_bytes == 8 else 1e-4


def kv_cache_bytes(config: ModelConfig, prefix_len: int) -> int:
    """Bytes of per-layer K and V for ``prefix_len`` tokens."""
    if prefix_len < 0:
        raise ValueError("prefix_len must be >= 0")
    return 2 * config.layers * prefix_len * config.dim * config.elem_bytes


@dataclass(frozen=True)
class Weights:
    wq: tuple
    wk: tuple
    wv: tuple
    head: np.ndarray


@lru_cache(maxsize=32)
def _weights(layers: int, dim: int, seed: int) -> Weights:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    wq, wk, wv = [], [], []
    for _ in range(layers):
        wq.append(rng.normal(0.0, scale, size=(dim, dim)))
        wk.append(rng.normal(0.0, scale, size=(dim, dim)))
        wv.append(rng.normal(0.0, scale, size=(dim, dim)))
    head = rng.normal(0.0, scale, size=dim)
    for arr in (*wq, *wk, *wv, head):
        arr.setflags(write=False)
    return Weights(tuple(wq), tuple(wk), tuple(wv), head)


def weights_for(config: ModelConfig) -> Weights:
    return _weights(config.layers, config.dim, config.seed)


def _tokens(block, dim: int, name: str) -> np.ndarray:
    """Coerce a list of vectors (or an array) into a ``(n, dim)`` float64 array."""
    if block is None:
        return np.zeros((0, dim))
    arr = np.asarray(block, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, dim))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{name}: expected vectors of length {dim}, got shape {arr.shape}")
    return arr


@dataclass
class SegmentedSequence:
    """Model input in order: user info, long-term, short-term, cross features, candidates."""

    user_info: np.ndarray
    long_term: np.ndarray
    short_term: np.ndarray = None
    cross_features: np.ndarray = None
    candidates: np.ndarray = None

    def blocks(self, dim: int) -> dict[str, np.ndarray]:
        return {
            "user_info": _tokens(self.user_info, dim, "user_info"),
            "long_term": _tokens(self.long_term, dim, "long_term"),
            "short_term": _tokens(self.short_term, dim, "short_term"),
            "cross_features": _tokens(self.cross_features, dim, "cross_features"),
            "candidates": _tokens(self.candidates, dim, "candidates"),
        }

    def prefix(self, dim: int) -> np.ndarray:
        b = self.blocks(dim)
        return np.vstack([b["user_info"], b["long_term"]])

    def suffix(self, dim: int) -> np.ndarray:
        b = self.blocks(dim)
        return np.vstack([b["short_term"], b["cross_features"]])


class CacheState(str, enum.Enum):
    LIVE = "live-unconsumed"
    CONSUMED = "consumed"
    SPILLED = "spilled"
    RELOADING = "reloading"
    EVICTED = "evicted"


# Forward lifecycle plus two edges the serving layer needs: a failed reload
# falls back to spilled, and a new admission re-arms a consumed cache.
_TRANSITIONS = {
    CacheState.LIVE: {CacheState.CONSUMED},
    CacheState.CONSUMED: {CacheState.SPILLED, CacheState.LIVE},
    CacheState.SPILLED: {CacheState.RELOADING},
    CacheState.RELOADING: {CacheState.CONSUMED, CacheState.SPILLED},
    CacheState.EVICTED: set(),
}


@dataclass(eq=False)
class PrefixCache:
    """Per-layer K/V of a user's long-term prefix plus lifecycle metadata.

    ``per_layer_kv`` may be ``None`` for a sized placeholder: the simulator
    tracks footprints without materialising tensors.
    """

    user_key: str
    prefix_len: int
    byte_size: int
    config: ModelConfig
    per_layer_kv: tuple | None = None
    created_at: int = 0
    state: CacheState = CacheState.LIVE
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.prefix_len <= 0:
            raise ShapeError("prefix cache must cover at least one token")
        expected = kv_cache_bytes(self.config, self.prefix_len)
        if self.byte_size != expected:
            raise ShapeError(f"byte_size {self.byte_size} != {expected}")

    @classmethod
    def sized(cls, user_key: str, prefix_len: int, config: ModelConfig, created_at: int = 0):
        return cls(user_key, prefix_len, kv_cache_bytes(config, prefix_len), config, None, created_at)

    def transition(self, new: CacheState) -> None:
        new = CacheState(new)
        if new is CacheState.EVICTED:
            if self.state is CacheState.EVICTED:
                raise LifecycleError(f"{self.user_key}: already evicted")
        elif new not in _TRANSITIONS[self.state]:
            raise LifecycleError(f"{self.user_key}: {self.state.value} -> {new.value} not allowed")
        self.history.append((self.state, new))
        self.state = new


# ---------------------------------------------------------------------------
# Reference path: dense masked attention over the full sequence.
# ---------------------------------------------------------------------------


def _full_mask(n_ctx: int, n_cand: int) -> np.ndarray:
    size = n_ctx + n_cand
    mask = np.tril(np.ones((size, size), dtype=bool))
    mask[n_ctx:, n_ctx:] = np.eye(n_cand, dtype=bool)
    return mask


def full_infer(config: ModelConfig, seq: SegmentedSequence) -> np.ndarray:
    """Score every candidate with the long prefix recomputed inline."""
    b = seq.blocks(config.dim)
    cands = b["candidates"]
    if cands.shape[0] == 0:
        raise ShapeError("full_infer needs at least one candidate")
    ctx = np.vstack([b["user_info"], b["long_term"], b["short_term"], b["cross_features"]])
    if ctx.shape[0] == 0:
        raise ShapeError("full_infer needs at least one context token")
    w = weights_for(config)
    z = np.vstack([ctx, cands])
    mask = _full_mask(ctx.shape[0], cands.shape[0])
    scale = 1.0 / np.sqrt(config.dim)
    for layer in range(config.layers):
        q, k, v = z @ w.wq[layer], z @ w.wk[layer], z @ w.wv[layer]
        s = np.where(mask, (q @ k.T) * scale, -np.inf)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        z = z + p @ v
    return z[ctx.shape[0]:] @ w.head


# ---------------------------------------------------------------------------
# Cached path: incremental extension of per-layer K/V.
# ---------------------------------------------------------------------------


def prefix_preinfer(config: ModelConfig, user_info, long_term, user_key: str = "",
                    created_at: int = 0) -> PrefixCache:
    """Run the backbone over ``[user_info, long_term]`` and keep every layer's K/V."""
    x = np.vstack([_tokens(user_info, config.dim, "user_info"),
                   _tokens(long_term, config.dim, "long_term")])
    if x.shape[0] == 0:
        raise ShapeError("prefix must contain at least one token")
    w = weights_for(config)
    kv = []
    h = x
    for layer in range(config.layers):
        q, k, v = h @ w.wq[layer], h @ w.wk[layer], h @ w.wv[layer]
        kv.append((k, v))
        h = h + kernels.attend_causal(q, k, v, 0)
    n = x.shape[0]
    return PrefixCache(user_key, n, kv_cache_bytes(config, n), config, tuple(kv), created_at)


def rank_with_cache(config: ModelConfig, cache: PrefixCache, suffix, candidates) -> np.ndarray:
    """Score candidates on top of a cached prefix plus a (possibly empty) suffix."""
    if cache.state is CacheState.EVICTED:
        raise StaleCacheError(f"cache for {cache.user_key!r} was evicted")
    if cache.per_layer_kv is None:
        raise ShapeError("sized placeholder cache carries no tensors")
    if cache.config != config:
        raise ShapeError(f"cache built for {cache.config}, ranking with {config}")
    if len(cache.per_layer_kv) != config.layers:
        raise ShapeError("cache layer count does not match config")
    hs = _tokens(suffix, config.dim, "suffix")
    hc = _tokens(candidates, config.dim, "candidates")
    if hc.shape[0] == 0:
        raise ShapeError("rank_with_cache needs at least one candidate")
    w = weights_for(config)
    offset = cache.prefix_len
    for layer, (kp, vp) in enumerate(cache.per_layer_kv):
        if kp.shape != (offset, config.dim):
            raise ShapeError(f"layer {layer}: cached K has shape {kp.shape}")
        ks, vs = hs @ w.wk[layer], hs @ w.wv[layer]
        k_all = np.vstack([kp, ks])
        v_all = np.vstack([vp, vs])
        qc, kc, vc = hc @ w.wq[layer], hc @ w.wk[layer], hc @ w.wv[layer]
        hc = hc + kernels.attend_targets(qc, k_all, v_all, kc, vc)
        if hs.shape[0]:
            hs = hs + kernels.attend_causal(hs @ w.wq[layer], k_all, v_all, offset)
    return hc @ w.head


def rank_sequence_with_cache(config: ModelConfig, cache: PrefixCache, seq: SegmentedSequence):
    return rank_with_cache(config, cache, seq.suffix(config.dim), seq.blocks(config.dim)["candidates"])


def random_sequence(rng: np.random.Generator, dim: int, n_user: int, n_long: int,
                    n_short: int = 0, n_cross: int = 0, n_cand: int = 1) -> SegmentedSequence:
    """Gaussian token vectors for tests, verification runs and the toy behaviour store."""
    def block(n):
        return rng.normal(size=(n, dim))

    return SegmentedSequence(block(n_user), block(n_long), block(n_short), block(n_cross), block(n_cand))


def corrupt_cache(cache: PrefixCache, scale: float = 1e-3) -> PrefixCache:
    """Copy of ``cache`` with the first layer's K nudged; a negative control."""
    kv = [(k.copy(), v.copy()) for k, v in cache.per_layer_kv]
    kv[0][0][-1] += scale
    return PrefixCache(cache.user_key, cache.prefix_len, cache.byte_size, cache.config,
                       tuple(kv), cache.created_at)


def max_deviation(config: ModelConfig, seq: SegmentedSequence, corrupt: bool = False) -> float:
    """Largest absolute score gap between the cached and full paths."""
    cache = prefix_preinfer(config, seq.user_info, seq.long_term)
    if corrupt:
        cache = corrupt_cache(cache)
    cached = rank_sequence_with_cache(config, cache, seq)
    return float(np.max(np.abs(cached - full_infer(config, seq))))
