"""Differentiable objectives built on the caller's tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evuq import autodiff as ad
from evuq.autodiff import Tensor


@dataclass(frozen=True)
class LossValue:
    node: Tensor
    value: float

    @classmethod
    def of(cls, node: Tensor) -> "LossValue":
        value = float(node.data)
        if not np.isfinite(value):
            raise ad.TrainingError(f"non-finite loss value {value}")
        return cls(node, value)


def _onehot(y, k=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("integer labels expected")
        return np.eye(k)[y]
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    return y


def enn_sq_loss(alpha: Tensor, y) -> LossValue:
    """Expected squared error of a Dirichlet-distributed probability vector.

    Per sample ``sum_j y_j^2 - 2 y_j E[p_j] + E[p_j^2]`` with the Dirichlet
    moments ``E[p_j] = a_j/S`` and ``E[p_j^2] = a_j (a_j+1) / (S (S+1))``;
    averaged over the batch.
    """
    alpha = ad.as_tensor(alpha)
    y = _onehot(y, alpha.shape[1])
    if y.shape != alpha.shape:
        raise ad.ShapeError(f"labels {y.shape} vs alpha {alpha.shape}")
    yt = Tensor(y)
    s = ad.tsum(alpha, 1)
    s_cols = ad.expand(s, alpha.shape, 1)
    p_mean = alpha / s_cols
    p_sq = (alpha * (alpha + 1.0)) / (s_cols * (s_cols + 1.0))
    per = ad.tsum(ad.square(yt) - 2.0 * (yt * p_mean) + p_sq, 1)
    return LossValue.of(ad.tmean(per))


def cross_entropy_loss(logits: Tensor, y) -> LossValue:
    """Mean NLL of softmax(logits), log-sum-exp stabilised."""
    logits = ad.as_tensor(logits)
    y = _onehot(y, logits.shape[1])
    lse = ad.logsumexp_rows(logits)
    picked = ad.tsum(logits * Tensor(y), 1)
    return LossValue.of(ad.tmean(lse - picked))


def cross_entropy_from_probs(p, y) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = _onehot(y, p.shape[1])
    with np.errstate(divide="ignore"):
        logp = np.where(y > 0, np.log(np.where(y > 0, p, 1.0)), 0.0)
    return float(-np.mean(np.sum(y * logp, axis=1)))


def mean_vacuity(alpha: Tensor) -> LossValue:
    alpha = ad.as_tensor(alpha)
    k = alpha.shape[1]
    vac = k / ad.tsum(alpha, 1)
    return LossValue.of(ad.tmean(vac))


def regularized_enn_loss(alpha_in, y_in, alpha_out, beta: float) -> LossValue:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    fit = enn_sq_loss(alpha_in, y_in)
    if beta == 0:
        return fit
    return LossValue.of(fit.node - beta * mean_vacuity(alpha_out).node)


def interpolate(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1))
    return t * x_real + (1.0 - t) * x_fake


def gradient_penalty(d, x_real, x_fake, lambda_gp: float, rng=None, tape=None, x_hat=None) -> LossValue:
    """``lambda * mean (||grad D(x~)|| - 1)^2`` on random interpolates, differentiable w.r.t. D's weights."""
    x_real = np.asarray(x_real)
    x_fake = np.asarray(x_fake)
    if x_real.shape != x_fake.shape:
        raise ad.ShapeError("real and fake batches must have equal shapes")
    tape = tape if tape is not None else ad.current_tape()
    if tape is None:
        raise ad.AutodiffError("gradient_penalty must be built on an active tape")
    if x_hat is None:
        x_hat = interpolate(x_real, x_fake, rng if rng is not None else np.random.default_rng())
    xt = Tensor(x_hat, requires_grad=True)
    out = ad.tsum(d(xt))
    g = ad.grad_as_node(tape, out, xt)
    norms = ad.l2_norm_rows(g)
    return LossValue.of(lambda_gp * ad.tmean(ad.square(norms - 1.0)))


def critic_loss(d, x_real, x_fake, lipschitz_mode="gp", lambda_gp=10.0, clip_c=0.01, rng=None) -> LossValue:
    """``mean D(fake) - mean D(real)`` (+ gradient penalty in gp mode).

    In ``clip`` mode the caller clips the critic's weights after stepping.
    """
    if lipschitz_mode not in ("gp", "clip"):
        raise ValueError(f"unknown lipschitz mode {lipschitz_mode!r}")
    w = ad.tmean(d(Tensor(x_fake))) - ad.tmean(d(Tensor(x_real)))
    if lipschitz_mode == "gp":
        w = w + gradient_penalty(d, x_real, x_fake, lambda_gp, rng=rng).node
    return LossValue.of(w)


def wasserstein_estimate(d, x_real, x_fake) -> float:
    real = d(Tensor(x_real)).data.astype(np.float64)
    fake = d(Tensor(x_fake)).data.astype(np.float64)
    return float(real.mean() - fake.mean())


def generator_loss(d, f, g, z, beta: float) -> LossValue:
    """Objective the generator ASCENDS: ``mean D(G(z)) + beta * mean Vac(f(G(z)))``.

    The classifier and the critic enter as frozen constants, so only the
    generator's weights receive gradient.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    x_hat = g(Tensor(z))
    obj = ad.tmean(d(x_hat, frozen=True))
    if beta > 0:
        obj = obj + beta * mean_vacuity(f(x_hat, frozen=True)).node
    return LossValue.of(obj)
