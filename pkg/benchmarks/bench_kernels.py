"""Time each hot kernel under numba and under plain numpy.

    python benchmarks/bench_kernels.py [--repeat N]

The first numba call compiles; it is excluded by a warm-up run.
"""

import argparse
import timeit

import numpy as np

from relayrank import kernels


def cases(rng):
    keys = [f"user-{i}" for i in range(100_000)]
    buf, offsets = kernels.pack_keys(keys)
    n, d = 512, 32
    q, k, v = rng.normal(size=(n, d)), rng.normal(size=(2 * n, d)), rng.normal(size=(2 * n, d))
    cand = rng.normal(size=(256, d))
    arrivals = np.sort(rng.integers(0, 10**7, size=50_000)).astype(np.int64)
    durations = rng.integers(1_000, 50_000, size=50_000).astype(np.int64)
    return {
        "hash_packed": (buf, offsets),
        "attend_causal": (q, k, v, n),
        "attend_targets": (cand, k, v, cand, cand),
        "fifo_slots": (arrivals, durations, 5),
        "window_counts": (arrivals, 400_000),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, call_args in cases(rng).items():
        nb, np_ = kernels.IMPLEMENTATIONS[name]
        nb(*call_args)  # compile
        t_nb = min(timeit.repeat(lambda: nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: np_(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_nb:>12.3f}{t_np:>12.3f}{t_np / t_nb:>9.1f}x")
    print()
    print("attention by size (µs per call); the library picks numba at <= "
          f"{kernels.ATTEND_NUMBA_MAX_PAIRS} query-key pairs")
    print(f"{'n':>6}{'pairs':>8}{'numba':>10}{'numpy':>10}")
    for n in (8, 16, 32, 64, 128, 256):
        q, k, v = rng.normal(size=(n, 16)), rng.normal(size=(2 * n, 16)), rng.normal(size=(2 * n, 16))
        nb, np_ = kernels.IMPLEMENTATIONS["attend_causal"]
        t_nb = min(timeit.repeat(lambda: nb(q, k, v, n), number=20, repeat=args.repeat)) / 20 * 1e6
        t_np = min(timeit.repeat(lambda: np_(q, k, v, n), number=20, repeat=args.repeat)) / 20 * 1e6
        print(f"{n:>6}{2 * n * n:>8}{t_nb:>10.1f}{t_np:>10.1f}")


if __name__ == "__main__":
    main()
