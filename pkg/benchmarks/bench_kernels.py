"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each pair is checked for agreement before timing. The numba variants are
called once first so compilation is not counted.
"""
import argparse
import timeit

import numpy as np

from evuq import _kernels


def _cases(rng):
    b = rng.dirichlet(np.ones(3), size=40_000) * rng.uniform(0, 1, (40_000, 1))
    scores = np.round(rng.normal(size=20_000), 2)
    p = rng.normal(size=250_000).astype(np.float32)
    g = rng.normal(size=p.size).astype(np.float32)

    def adam(fn):
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        q = p.copy()
        fn(q, g, m, v, 1e-3, 0.9, 0.999, 1e-8)
        return q

    return {
        "dissonance_rows (40k x 3)": (lambda: _kernels.dissonance_rows_numba(b),
                                      lambda: _kernels.dissonance_rows_numpy(b)),
        "midranks (20k, ties)": (lambda: _kernels.midranks_numba(scores),
                                 lambda: _kernels.midranks_numpy(scores)),
        "adam_update (250k params)": (lambda: adam(_kernels.adam_update_numba),
                                      lambda: adam(_kernels.adam_update_numpy)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba not importable; nothing to compare")
        return 1
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow) in _cases(np.random.default_rng(0)).items():
        np.testing.assert_allclose(fast(), slow(), rtol=1e-6, atol=1e-9)
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {t_fast:10.3f} {t_slow:10.3f} {t_slow / t_fast:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
