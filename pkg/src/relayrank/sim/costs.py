"""Latency cost model and its least-squares calibration.

All model costs are in milliseconds for a reference backbone (8 layers, 256
wide) and scale linearly in depth and width. Pre-inference is quadratic in
the token count; cache loading is linear in bytes; ranking on a cached prefix
is linear in the incremental tokens plus a small quadratic suffix term.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError
from ..events import ms_to_us
from ..model import ModelConfig, kv_cache_bytes

REFERENCE_MODEL = ModelConfig(layers=8, dim=256, elem_bytes=4, seed=0)


@dataclass(frozen=True)
class Anchors:
    """Calibration targets. ``pre`` holds (tokens, ms); ``rank`` holds
    (suffix_tokens, items, ms); ``load`` holds (prefix_tokens, ms) sized with
    the reference model."""

    pre: tuple = ((1024, 27.0), (2048, 35.0), (4096, 52.0), (8192, 93.0))
    rank: tuple = ((64, 512, 3.0), (64, 2048, 8.5))
    load: tuple = ((2048, 2.9), (15000, 18.0))
    rank_quadratic: float = 1e-6


@dataclass(frozen=True)
class CostModel:
    pre_coeffs: tuple = (3.0e-7, 6.5e-3, 20.0)
    rank_coeffs: tuple = (1e-6, 3.58e-3, 0.94)
    load_fixed_ms: float = 0.5
    reload_bandwidth: float = 14e9
    hbm_access_ms: float = 0.05
    remote_rtt_ms: float = 5.0
    remote_bandwidth: float = 1e9
    layers: int = REFERENCE_MODEL.layers
    dim: int = REFERENCE_MODEL.dim
    slot_contention: float = 0.0
    shared_bandwidth: bool = True
    retrieval_ms: tuple = (20.0, 40.0)
    preprocess_ms: tuple = (20.0, 40.0)
    trigger_ms: float = 1.0

    def __post_init__(self):
        if self.reload_bandwidth <= 0 or self.remote_bandwidth <= 0:
            raise ConfigError("bandwidths must be positive")
        if self.load_fixed_ms < 0 or self.hbm_access_ms < 0:
            raise ConfigError("latencies must be nonnegative")
        for name in ("retrieval_ms", "preprocess_ms"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must be 0 <= lo <= hi")

    @property
    def scale(self) -> float:
        return (self.layers / REFERENCE_MODEL.layers) * (self.dim / REFERENCE_MODEL.dim)

    def with_shape(self, layers: int, dim: int) -> "CostModel":
        return replace(self, layers=layers, dim=dim)

    # -- milliseconds -------------------------------------------------------

    def pre_ms(self, n: int) -> float:
        a2, a1, a0 = self.pre_coeffs
        return max(0.0, (a2 * n * n + a1 * n + a0) * self.scale)

    def full_ms(self, n_total: int) -> float:
        return self.pre_ms(n_total)

    def rank_ms(self, suffix: int, items: int) -> float:
        b2, b1, b0 = self.rank_coeffs
        return max(0.0, (b2 * suffix * suffix + b1 * (suffix + items) + b0) * self.scale)

    def load_ms(self, nbytes: int, share: int = 1) -> float:
        bw = self.reload_bandwidth / max(1, share) if self.shared_bandwidth else self.reload_bandwidth
        return nbytes / bw * 1e3 + self.load_fixed_ms

    def remote_ms(self, nbytes: int) -> float:
        return self.remote_rtt_ms + nbytes / self.remote_bandwidth * 1e3

    # -- microseconds, rounded up ---------------------------------------------

    def pre_us(self, n: int) -> int:
        return ms_to_us(self.pre_ms(n))

    def full_us(self, n_total: int) -> int:
        return ms_to_us(self.full_ms(n_total))

    def rank_us(self, suffix: int, items: int) -> int:
        return ms_to_us(self.rank_ms(suffix, items) + self.hbm_access_ms)

    def load_us(self, nbytes: int, share: int = 1) -> int:
        return ms_to_us(self.load_ms(nbytes, share))

    def remote_us(self, nbytes: int) -> int:
        return ms_to_us(self.remote_ms(nbytes))

    def contended(self, duration_us: int, busy: int) -> int:
        if self.slot_contention <= 0 or busy <= 1:
            return duration_us
        return int(np.ceil(duration_us * (1.0 + self.slot_contention * (busy - 1))))


def calibrate(anchors: Anchors = Anchors(), base: CostModel | None = None,
              sizing: ModelConfig = REFERENCE_MODEL) -> CostModel:
    """Least-squares fit of the pre, rank and load curves through ``anchors``."""
    base = base or CostModel()
    if len(anchors.pre) < 3:
        raise ConfigError("pre curve needs at least 3 anchors; give explicit coefficients instead")
    if len(anchors.rank) < 2 or len(anchors.load) < 2:
        raise ConfigError("rank and load curves need at least 2 anchors each")

    n = np.array([a[0] for a in anchors.pre], dtype=float)
    y = np.array([a[1] for a in anchors.pre], dtype=float)
    a2, a1, a0 = np.linalg.lstsq(np.column_stack([n * n, n, np.ones_like(n)]), y, rcond=None)[0]

    b2 = anchors.rank_quadratic
    s = np.array([a[0] for a in anchors.rank], dtype=float)
    k = np.array([a[1] for a in anchors.rank], dtype=float)
    y = np.array([a[2] for a in anchors.rank], dtype=float) - b2 * s * s
    b1, b0 = np.linalg.lstsq(np.column_stack([s + k, np.ones_like(s)]), y, rcond=None)[0]

    nbytes = np.array([kv_cache_bytes(sizing, a[0]) for a in anchors.load], dtype=float)
    y = np.array([a[1] for a in anchors.load], dtype=float)
    slope, fixed = np.linalg.lstsq(np.column_stack([nbytes, np.ones_like(nbytes)]), y, rcond=None)[0]
    if slope <= 0:
        raise ConfigError("load anchors must increase with cache size")

    return replace(
        base,
        pre_coeffs=(float(a2), float(a1), float(a0)),
        rank_coeffs=(float(b2), float(b1), float(b0)),
        load_fixed_ms=max(0.0, float(fixed)),
        reload_bandwidth=float(1e3 / slope),
        layers=sizing.layers,
        dim=sizing.dim,
    )


def anchor_report(model: CostModel, anchors: Anchors = Anchors(),
                  sizing: ModelConfig = REFERENCE_MODEL) -> list[dict]:
    """Model value next to each anchor, with relative error."""
    rows = []
    for n, ms in anchors.pre:
        rows.append({"curve": "pre", "point": n, "target_ms": ms, "model_ms": model.pre_ms(n)})
    for s, k, ms in anchors.rank:
        rows.append({"curve": "rank", "point": k, "target_ms": ms, "model_ms": model.rank_ms(s, k)})
    for n, ms in anchors.load:
        rows.append({"curve": "load", "point": n, "target_ms": ms,
                     "model_ms": model.load_ms(kv_cache_bytes(sizing, n))})
    for row in rows:
        row["rel_error"] = abs(row["model_ms"] - row["target_ms"]) / row["target_ms"]
    return rows


DEFAULT_COSTS = calibrate()
