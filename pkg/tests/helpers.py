"""Shared test utilities."""
import numpy as np

from evuq import autodiff as ad
from evuq.autodiff import Tape, Tensor


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, inputs, h=1e-6) -> float:
    """Worst relative error between 32-bit reverse-mode and float64 central differences.

    ``fn`` maps input Tensors to a scalar Tensor and runs inside an active tape.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    ts = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        analytic = ad.backward(tape, fn(*ts), ts)

    def value(arrs):
        with ad.precision(np.float64), Tape():
            return float(fn(*[Tensor(a, requires_grad=True) for a in arrs]).data)

    worst = 0.0
    for i, x in enumerate(inputs):
        num = np.zeros_like(x)
        for j in np.ndindex(x.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][j] += h
            minus[i][j] -= h
            num[j] = (value(plus) - value(minus)) / (2 * h)
        worst = max(worst, rel_err(analytic[i], num))
    return worst
