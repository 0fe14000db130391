import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relayrank import _jit, kernels

keys_st = st.lists(st.text(min_size=0, max_size=24), min_size=1, max_size=40)


@given(keys_st)
@settings(max_examples=60, deadline=None)
def test_batch_hash_matches_scalar_reference(keys):
    expected = np.array([kernels.hash_key(k) for k in keys], dtype=np.uint64)
    buf, offsets = kernels.pack_keys(keys)
    nb, np_ = kernels.IMPLEMENTATIONS["hash_packed"]
    assert np.array_equal(np_(buf, offsets), expected)
    assert np.array_equal(nb(buf, offsets), expected)


def test_hash_is_pinned():
    # Cross-process rendezvous depends on this never changing.
    assert kernels.hash_key("") == kernels.hash_key("")
    assert kernels.hash_key("user-1") != kernels.hash_key("user-2")
    out = subprocess.run([sys.executable, "-c", "from relayrank.kernels import hash_key; print(hash_key('user-42'))"],
                         capture_output=True, text=True, check=True)
    assert int(out.stdout) == kernels.hash_key("user-42")


@pytest.mark.parametrize("offset", [0, 3, 17])
def test_attend_causal_backends_agree(rng, offset):
    n, d = 7, 8
    q = rng.normal(size=(n, d))
    k = rng.normal(size=(offset + n, d))
    v = rng.normal(size=(offset + n, d))
    nb, np_ = kernels.IMPLEMENTATIONS["attend_causal"]
    np.testing.assert_allclose(nb(q, k, v, offset), np_(q, k, v, offset), atol=1e-12)


def test_attend_causal_row_sees_only_its_past(rng):
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    base = kernels.IMPLEMENTATIONS["attend_causal"][1](q, k, v, 2)
    k2, v2 = k.copy(), v.copy()
    k2[4] += 10.0
    v2[4] += 10.0
    moved = kernels.IMPLEMENTATIONS["attend_causal"][1](q, k2, v2, 2)
    np.testing.assert_allclose(base[:2], moved[:2])
    assert not np.allclose(base[2], moved[2])


def test_attend_targets_backends_agree(rng):
    qc, kc, vc = (rng.normal(size=(5, 8)) for _ in range(3))
    kctx, vctx = rng.normal(size=(11, 8)), rng.normal(size=(11, 8))
    nb, np_ = kernels.IMPLEMENTATIONS["attend_targets"]
    np.testing.assert_allclose(nb(qc, kctx, vctx, kc, vc), np_(qc, kctx, vctx, kc, vc), atol=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 300)), min_size=1, max_size=60),
       st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_fifo_slots_backends_agree(jobs, m):
    jobs.sort()
    arrivals = np.array([a for a, _ in jobs], dtype=np.int64)
    durations = np.array([d for _, d in jobs], dtype=np.int64)
    nb, np_ = kernels.IMPLEMENTATIONS["fifo_slots"]
    s1, f1 = nb(arrivals, durations, m)
    s2, f2 = np_(arrivals, durations, m)
    assert np.array_equal(s1, s2) and np.array_equal(f1, f2)
    assert np.all(s1 >= arrivals) and np.array_equal(f1 - s1, durations)
    # never more than m executing at once
    for t in np.unique(s1):
        assert np.sum((s1 <= t) & (f1 > t)) <= m


@given(st.lists(st.integers(0, 500), min_size=1, max_size=80), st.integers(1, 100))
@settings(max_examples=60, deadline=None)
def test_window_counts_backends_agree(times, width):
    t = np.sort(np.array(times, dtype=np.int64))
    nb, np_ = kernels.IMPLEMENTATIONS["window_counts"]
    brute = np.array([np.sum((t > x - width) & (t <= x)) for x in t])
    assert np.array_equal(np_(t, width), brute)
    assert np.array_equal(nb(t, width), brute)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, RELAYRANK_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from relayrank import _jit; print(_jit.backend())"],
                         capture_output=True, text=True, check=True, env=env)
    assert out.stdout.strip() == "numpy"
    assert _jit.backend() in ("numba", "numpy")
