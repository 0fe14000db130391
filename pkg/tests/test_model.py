import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relayrank.errors import ConfigError, LifecycleError, ShapeError, StaleCacheError
from relayrank.model import (CacheState, ModelConfig, PrefixCache, corrupt_cache, full_infer,
                             kv_cache_bytes, max_deviation, prefix_preinfer, random_sequence,
                             rank_sequence_with_cache)

# Frozen regression values; recompute deliberately if the weight init changes.
GOLDEN = [
    ((7, 16, 4, 60, 0, 0, 4),
     [-3.0475346425441456, -0.426656699814425, 0.4271387459014919, -1.03503930471177]),
    ((11, 16, 2, 30, 5, 3, 6),
     [0.9143012061692402, -3.3667241118493862, 0.6215427384418822, -1.78369268554686,
      -1.3566042950092965, 0.13908000944338395]),
]


@pytest.mark.parametrize("args,expected", GOLDEN)
def test_golden_scores(toy, args, expected):
    seed, *shape = args
    seq = random_sequence(np.random.default_rng(seed), *shape)
    np.testing.assert_allclose(full_infer(toy, seq), expected, rtol=0, atol=1e-12)
    cache = prefix_preinfer(toy, seq.user_info, seq.long_term)
    np.testing.assert_allclose(rank_sequence_with_cache(toy, cache, seq), expected, atol=1e-12)


@given(n_user=st.integers(0, 4), n_long=st.integers(1, 40), n_short=st.integers(0, 6),
       n_cross=st.integers(0, 3), n_cand=st.integers(1, 8), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_cached_equals_full(n_user, n_long, n_short, n_cross, n_cand, seed):
    cfg = ModelConfig(2, 16, 8, 42)
    seq = random_sequence(np.random.default_rng(seed), 16, n_user, n_long, n_short, n_cross, n_cand)
    assert max_deviation(cfg, seq) <= cfg.epsilon


def test_float32_tolerance():
    cfg = ModelConfig(3, 32, 4, 1)
    assert cfg.epsilon == 1e-4
    seq = random_sequence(np.random.default_rng(0), 32, 2, 50, 4, 2, 5)
    assert max_deviation(cfg, seq) <= cfg.epsilon


def test_candidates_do_not_see_each_other(toy):
    rng = np.random.default_rng(3)
    seq = random_sequence(rng, 16, 2, 20, 2, 0, 3)
    base = full_infer(toy, seq)
    seq.candidates = np.vstack([seq.candidates, rng.normal(size=(4, 16))])
    np.testing.assert_allclose(full_infer(toy, seq)[:3], base, atol=1e-12)


def test_corruption_is_detected(toy):
    seq = random_sequence(np.random.default_rng(5), 16, 2, 30, 3, 0, 4)
    assert max_deviation(toy, seq, corrupt=True) > toy.epsilon
    cache = prefix_preinfer(toy, seq.user_info, seq.long_term)
    bad = corrupt_cache(cache)
    assert not np.array_equal(bad.per_layer_kv[0][0], cache.per_layer_kv[0][0])


def test_byte_formula():
    assert kv_cache_bytes(ModelConfig(4, 1024, 4, 0), 2048) == 2 * 4 * 2048 * 1024 * 4 == 67108864
    cache = prefix_preinfer(ModelConfig(2, 16, 8, 42), np.zeros((1, 16)), np.ones((9, 16)))
    assert cache.byte_size == 2 * 2 * 10 * 16 * 8
    assert sum(k.nbytes + v.nbytes for k, v in cache.per_layer_kv) == cache.byte_size


def test_config_validation():
    for bad in (dict(layers=0), dict(dim=0), dict(elem_bytes=2)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def test_shape_errors(toy):
    with pytest.raises(ShapeError):
        prefix_preinfer(toy, np.zeros((0, 16)), np.zeros((0, 16)))
    with pytest.raises(ShapeError):
        prefix_preinfer(toy, np.zeros((1, 8)), np.zeros((2, 8)))
    seq = random_sequence(np.random.default_rng(0), 16, 1, 5, 0, 0, 2)
    cache = prefix_preinfer(toy, seq.user_info, seq.long_term)
    with pytest.raises(ShapeError):
        rank_sequence_with_cache(ModelConfig(3, 16, 8, 42), cache, seq)
    with pytest.raises(ShapeError):
        rank_sequence_with_cache(toy, PrefixCache.sized("u", 6, toy), seq)
    with pytest.raises(ShapeError):
        PrefixCache("u", 6, 123, toy)


def test_lifecycle_edges(toy):
    c = PrefixCache.sized("u", 4, toy)
    assert c.state is CacheState.LIVE
    with pytest.raises(LifecycleError):
        c.transition(CacheState.SPILLED)
    for s in (CacheState.CONSUMED, CacheState.SPILLED, CacheState.RELOADING,
              CacheState.SPILLED, CacheState.RELOADING, CacheState.CONSUMED, CacheState.LIVE):
        c.transition(s)
    c.transition(CacheState.EVICTED)
    with pytest.raises(LifecycleError):
        c.transition(CacheState.EVICTED)
    with pytest.raises(LifecycleError):
        c.transition(CacheState.LIVE)


def test_evicted_cache_cannot_rank(toy):
    seq = random_sequence(np.random.default_rng(0), 16, 1, 5, 0, 0, 2)
    cache = prefix_preinfer(toy, seq.user_info, seq.long_term)
    cache.transition(CacheState.EVICTED)
    with pytest.raises(StaleCacheError):
        rank_sequence_with_cache(toy, cache, seq)
