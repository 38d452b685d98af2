"""Hot inner loops, compiled with numba when available.

Set ``EVUQ_DISABLE_NUMBA=1`` to force the pure-numpy implementations. Both
variants of every kernel are importable (``*_numba`` / ``*_numpy``) so the
test-suite and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


USE_NUMBA = HAVE_NUMBA and os.environ.get("EVUQ_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# --------------------------------------------------------------------------
# dissonance over a batch of belief vectors
# --------------------------------------------------------------------------

@njit(cache=True)
def dissonance_rows_numba(beliefs):
    n, k = beliefs.shape
    out = np.zeros(n)
    for r in range(n):
        total = 0.0
        for i in range(k):
            bi = beliefs[r, i]
            if bi == 0.0:
                continue
            num = 0.0
            den = 0.0
            for j in range(k):
                if j == i:
                    continue
                bj = beliefs[r, j]
                den += bj
                if bj * bi != 0.0:
                    num += bj * (1.0 - abs(bj - bi) / (bj + bi))
            if den != 0.0:
                total += bi * num / den
        out[r] = total
    return out


def dissonance_rows_numpy(beliefs):
    b = np.asarray(beliefs, dtype=np.float64)
    bi = b[:, :, None]
    bj = b[:, None, :]
    both = (bi * bj) != 0.0
    pair_sum = np.where(both, bi + bj, 1.0)
    bal = np.where(both, 1.0 - np.abs(bj - bi) / pair_sum, 0.0)
    k = b.shape[1]
    off = ~np.eye(k, dtype=bool)
    num = np.sum(np.where(off, bj * bal, 0.0), axis=2)
    den = b.sum(axis=1, keepdims=True) - b
    safe = np.where(den != 0.0, den, 1.0)
    terms = np.where((den != 0.0) & (b != 0.0), b * num / safe, 0.0)
    return terms.sum(axis=1)


# --------------------------------------------------------------------------
# midranks (average ranks for ties), 1-based
# --------------------------------------------------------------------------

@njit(cache=True)
def midranks_numba(values):
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def midranks_numpy(values):
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    _, first, counts = np.unique(sorted_v, return_index=True, return_counts=True)
    avg = first + 0.5 * (counts - 1) + 1.0
    ranks = np.empty(v.shape[0])
    ranks[order] = np.repeat(avg, counts)
    return ranks


# --------------------------------------------------------------------------
# fused Adam update (in place)
# --------------------------------------------------------------------------

@njit(cache=True)
def adam_update_numba(p, g, m, v, lr_t, b1, b2, eps_t):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.shape[0]):
        gi = gf[i]
        mf[i] = b1 * mf[i] + (1.0 - b1) * gi
        vf[i] = b2 * vf[i] + (1.0 - b2) * gi * gi
        pf[i] -= lr_t * mf[i] / (np.sqrt(vf[i]) + eps_t)


def adam_update_numpy(p, g, m, v, lr_t, b1, b2, eps_t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr_t * m / (np.sqrt(v) + eps_t)


if USE_NUMBA:
    dissonance_rows = dissonance_rows_numba
    midranks = midranks_numba
    adam_update = adam_update_numba
else:
    dissonance_rows = dissonance_rows_numpy
    midranks = midranks_numpy
    adam_update = adam_update_numpy


def set_threads(hint) -> int:
    """Apply an ``EVUQ_THREADS`` worker-count hint; malformed or out-of-range values are ignored."""
    try:
        n = int(hint)
    except (TypeError, ValueError):
        return 0
    if n < 1:
        return 0
    if HAVE_NUMBA:
        import numba

        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n
