"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public kernel ``foo`` is bound to either ``_foo_nb`` (numba) or
``_foo_np`` (numpy) depending on :data:`relayrank._jit.USE_NUMBA`; with numba
on, the attention kernels still fall back to numpy for large inputs. The two
implementations are kept side by side and must agree; ``tests/test_kernels.py``
checks that, and ``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import heapq

import numpy as np

from ._jit import USE_NUMBA, njit

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# 64-bit key hash: FNV-1a over UTF-8 bytes followed by the splitmix64 finaliser.
# Pinned forever: ring placement must agree across processes and runs.
# ---------------------------------------------------------------------------


def hash_key(key: str) -> int:
    """Scalar reference implementation of the ring hash."""
    h = FNV_OFFSET
    for b in key.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return h ^ (h >> 31)


def pack_keys(keys) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate UTF-8 encoded keys into one byte buffer plus offsets."""
    encoded = [k.encode("utf-8") for k in keys]
    offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    if encoded:
        offsets[1:] = np.cumsum([len(e) for e in encoded])
    buf = np.frombuffer(b"".join(encoded), dtype=np.uint8)
    return buf, offsets


@njit
def _hash_packed_nb(buf, offsets):
    n = offsets.shape[0] - 1
    out = np.empty(n, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    s30 = np.uint64(30)
    s27 = np.uint64(27)
    s31 = np.uint64(31)
    for i in range(n):
        h = np.uint64(FNV_OFFSET)
        for j in range(offsets[i], offsets[i + 1]):
            h = (h ^ np.uint64(buf[j])) * prime
        h = (h ^ (h >> s30)) * m1
        h = (h ^ (h >> s27)) * m2
        out[i] = h ^ (h >> s31)
    return out


def _hash_packed_np(buf, offsets):
    n = offsets.shape[0] - 1
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    lengths = np.diff(offsets)
    width = int(lengths.max())
    # Ragged keys -> padded matrix; columns past a key's length leave h unchanged.
    mat = np.zeros((n, max(width, 1)), dtype=np.uint64)
    valid = np.arange(width)[None, :] < lengths[:, None]
    rows = np.repeat(np.arange(n), lengths)
    cols = np.arange(buf.shape[0]) - np.repeat(offsets[:-1], lengths)
    mat[rows, cols] = buf
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for j in range(width):
            stepped = (h ^ mat[:, j]) * prime
            h = np.where(valid[:, j], stepped, h)
        h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(31))
    return h


def hash_keys(keys) -> np.ndarray:
    """Hash many string keys at once; returns ``uint64`` array."""
    buf, offsets = pack_keys(keys)
    return hash_packed(buf, offsets)


# ---------------------------------------------------------------------------
# Attention over a cached context.
# ---------------------------------------------------------------------------


@njit
def _attend_causal_nb(q, k, v, offset):
    m, d = q.shape
    out = np.zeros((m, v.shape[1]))
    scale = 1.0 / np.sqrt(d)
    for i in range(m):
        last = offset + i + 1
        s = np.empty(last)
        top = -np.inf
        for j in range(last):
            acc = 0.0
            for c in range(d):
                acc += q[i, c] * k[j, c]
            s[j] = acc * scale
            if s[j] > top:
                top = s[j]
        z = 0.0
        for j in range(last):
            s[j] = np.exp(s[j] - top)
            z += s[j]
        for j in range(last):
            w = s[j] / z
            for c in range(v.shape[1]):
                out[i, c] += w * v[j, c]
    return out


def _attend_causal_np(q, k, v, offset):
    m, d = q.shape
    s = (q @ k.T) / np.sqrt(d)
    cols = np.arange(k.shape[0])[None, :]
    rows = np.arange(m)[:, None]
    s = np.where(cols <= rows + offset, s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v


@njit
def _attend_targets_nb(qc, kctx, vctx, kc, vc):
    m, d = qc.shape
    n = kctx.shape[0]
    out = np.zeros((m, vctx.shape[1]))
    scale = 1.0 / np.sqrt(d)
    s = np.empty(n + 1)
    for i in range(m):
        top = -np.inf
        for j in range(n):
            acc = 0.0
            for c in range(d):
                acc += qc[i, c] * kctx[j, c]
            s[j] = acc * scale
            if s[j] > top:
                top = s[j]
        acc = 0.0
        for c in range(d):
            acc += qc[i, c] * kc[i, c]
        s[n] = acc * scale
        if s[n] > top:
            top = s[n]
        z = 0.0
        for j in range(n + 1):
            s[j] = np.exp(s[j] - top)
            z += s[j]
        for j in range(n):
            w = s[j] / z
            for c in range(vctx.shape[1]):
                out[i, c] += w * vctx[j, c]
        w = s[n] / z
        for c in range(vctx.shape[1]):
            out[i, c] += w * vc[i, c]
    return out


def _attend_targets_np(qc, kctx, vctx, kc, vc):
    d = qc.shape[1]
    s_ctx = (qc @ kctx.T) / np.sqrt(d)
    s_self = np.einsum("ij,ij->i", qc, kc)[:, None] / np.sqrt(d)
    s = np.concatenate([s_ctx, s_self], axis=1)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p[:, :-1] @ vctx + p[:, -1:] * vc


# ---------------------------------------------------------------------------
# FIFO multi-slot scheduling: arrivals (sorted) served by m identical slots.
# ---------------------------------------------------------------------------


@njit
def _fifo_slots_nb(arrivals, durations, m):
    n = arrivals.shape[0]
    free = np.zeros(m, dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    finishes = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        for s in range(1, m):
            if free[s] < free[best]:
                best = s
        start = arrivals[i] if arrivals[i] > free[best] else free[best]
        starts[i] = start
        finishes[i] = start + durations[i]
        free[best] = finishes[i]
    return starts, finishes


def _fifo_slots_np(arrivals, durations, m):
    n = len(arrivals)
    starts = np.empty(n, dtype=np.int64)
    finishes = np.empty(n, dtype=np.int64)
    free = [0] * int(m)
    heapq.heapify(free)
    for i in range(n):
        earliest = heapq.heappop(free)
        start = max(int(arrivals[i]), earliest)
        starts[i] = start
        finishes[i] = start + int(durations[i])
        heapq.heappush(free, int(finishes[i]))
    return starts, finishes


# ---------------------------------------------------------------------------
# Sliding-window counts: for each event time t, events in (t - width, t].
# ---------------------------------------------------------------------------


@njit
def _window_counts_nb(times, width):
    n = times.shape[0]
    out = np.empty(n, dtype=np.int64)
    lo = 0
    for i in range(n):
        while times[lo] <= times[i] - width:
            lo += 1
        hi = i
        while hi + 1 < n and times[hi + 1] == times[i]:
            hi += 1
        out[i] = hi - lo + 1
    return out


def _window_counts_np(times, width):
    times = np.asarray(times, dtype=np.int64)
    hi = np.searchsorted(times, times, side="right")
    lo = np.searchsorted(times, times - width, side="right")
    return (hi - lo).astype(np.int64)


# Past this many query-key pairs numpy's BLAS matmuls beat the njit loops
# (see benchmarks/bench_kernels.py), so attention switches backend by size.
ATTEND_NUMBA_MAX_PAIRS = 4096


def _attend_causal_auto(q, k, v, offset):
    if q.shape[0] * k.shape[0] <= ATTEND_NUMBA_MAX_PAIRS:
        return _attend_causal_nb(q, k, v, offset)
    return _attend_causal_np(q, k, v, offset)


def _attend_targets_auto(qc, kctx, vctx, kc, vc):
    if qc.shape[0] * kctx.shape[0] <= ATTEND_NUMBA_MAX_PAIRS:
        return _attend_targets_nb(qc, kctx, vctx, kc, vc)
    return _attend_targets_np(qc, kctx, vctx, kc, vc)


if USE_NUMBA:
    hash_packed = _hash_packed_nb
    attend_causal = _attend_causal_auto
    attend_targets = _attend_targets_auto
    fifo_slots = _fifo_slots_nb
    window_counts = _window_counts_nb
else:
    hash_packed = _hash_packed_np
    attend_causal = _attend_causal_np
    attend_targets = _attend_targets_np
    fifo_slots = _fifo_slots_np
    window_counts = _window_counts_np

IMPLEMENTATIONS = {
    "hash_packed": (_hash_packed_nb, _hash_packed_np),
    "attend_causal": (_attend_causal_nb, _attend_causal_np),
    "attend_targets": (_attend_targets_nb, _attend_targets_np),
    "fifo_slots": (_fifo_slots_nb, _fifo_slots_np),
    "window_counts": (_window_counts_nb, _window_counts_np),
}
