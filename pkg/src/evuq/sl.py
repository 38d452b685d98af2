"""Subjective-logic opinions over Dirichlet-distributed class probabilities.

All quantities are computed in float64. Functions that take Dirichlet
parameters accept either a :class:`DirichletParams` or a raw array whose last
axis indexes the ``K`` classes; batched input gives batched output.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log

import numpy as np

from evuq import _kernels

ADDITIVITY_TOL = 1e-9


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class EvidenceVector:
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64)
        if r.ndim != 1 or r.size < 2:
            raise DomainError("evidence must be a vector with K >= 2 entries")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise DomainError(f"evidence must be finite and non-negative, got {r}")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise DomainError("alpha must be a vector with K >= 2 entries")
        if np.any(a < 1.0) or not np.all(np.isfinite(a)):
            raise DomainError(f"alpha entries must be finite and >= 1, got {a}")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @property
    def k(self) -> int:
        return self.alpha.size

    @property
    def strength(self) -> float:
        return float(self.alpha.sum())


@dataclass(frozen=True)
class Opinion:
    """Multinomial opinion ``(beliefs, uncertainty, base_rates)``."""

    beliefs: np.ndarray
    uncertainty: float
    base_rates: np.ndarray

    def __post_init__(self):
        b = np.array(self.beliefs, dtype=np.float64)
        a = np.array(self.base_rates, dtype=np.float64)
        u = float(self.uncertainty)
        if b.ndim != 1 or b.size < 2 or a.shape != b.shape:
            raise DomainError("beliefs and base_rates must be K-vectors, K >= 2")
        if np.any(b < 0):
            raise DomainError("belief masses must be non-negative")
        if not 0.0 <= u <= 1.0:
            raise DomainError(f"uncertainty mass must lie in [0, 1], got {u}")
        if abs(b.sum() + u - 1.0) > ADDITIVITY_TOL:
            raise DomainError("beliefs and uncertainty must sum to 1")
        if np.any(a <= 0) or abs(a.sum() - 1.0) > ADDITIVITY_TOL:
            raise DomainError("base rates must be positive and sum to 1")
        b.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "beliefs", b)
        object.__setattr__(self, "base_rates", a)
        object.__setattr__(self, "uncertainty", u)

    @property
    def k(self) -> int:
        return self.beliefs.size

    @classmethod
    def uniform(cls, beliefs, uncertainty) -> "Opinion":
        b = np.asarray(beliefs, dtype=np.float64)
        return cls(b, uncertainty, np.full(b.size, 1.0 / b.size))


def _alpha_array(a) -> np.ndarray:
    if isinstance(a, DirichletParams):
        return a.alpha
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 2:
        raise DomainError("alpha must have K >= 2 entries along its last axis")
    return arr


def _unwrap(x, batched):
    return x if batched else float(x)


def alpha_from_evidence(r) -> DirichletParams:
    """Dirichlet strength from evidence with uniform base rate and ``W = K``."""
    ev = r if isinstance(r, EvidenceVector) else EvidenceVector(r)
    return DirichletParams(ev.r + 1.0)


def opinion_from_alpha(a) -> Opinion:
    alpha = _alpha_array(a)
    if alpha.ndim != 1:
        raise DomainError("opinion_from_alpha takes a single alpha vector")
    s = alpha.sum()
    k = alpha.size
    return Opinion.uniform((alpha - 1.0) / s, k / s)


def projected_probability(o: Opinion) -> np.ndarray:
    return o.beliefs + o.base_rates * o.uncertainty


def expected_probability(a) -> np.ndarray:
    alpha = _alpha_array(a)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def belief_masses(a) -> np.ndarray:
    alpha = _alpha_array(a)
    return (alpha - 1.0) / alpha.sum(axis=-1, keepdims=True)


def vacuity(a):
    """Uncertainty mass ``K / S``; high when the total evidence is small."""
    alpha = _alpha_array(a)
    v = alpha.shape[-1] / alpha.sum(axis=-1)
    return _unwrap(v, alpha.ndim > 1)


def balance(b_j: float, b_i: float) -> float:
    if b_j < 0 or b_i < 0:
        raise DomainError("belief masses must be non-negative")
    if b_j * b_i == 0:
        return 0.0
    return 1.0 - abs(b_j - b_i) / (b_j + b_i)


def dissonance(a):
    """Conflict between singleton belief masses.

    A singleton whose complement carries no belief contributes nothing, so a
    single-class opinion has zero dissonance.
    """
    alpha = _alpha_array(a)
    batched = alpha.ndim > 1
    b = belief_masses(alpha).reshape(-1, alpha.shape[-1])
    d = _kernels.dissonance_rows(np.ascontiguousarray(b))
    if batched:
        return d.reshape(alpha.shape[:-1])
    return float(d[0])


def dirichlet_log_pdf(a, p) -> float:
    alpha = _alpha_array(a)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != alpha.shape or alpha.ndim != 1:
        raise DomainError("p and alpha must be K-vectors of equal length")
    if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("p must lie in the open probability simplex")
    log_norm = lgamma(alpha.sum()) - sum(lgamma(x) for x in alpha)
    return float(log_norm + np.sum((alpha - 1.0) * np.log(p)))


def normalized_entropy(p):
    """Shannon entropy divided by ``ln K`` (``0 log 0 = 0``)."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1) / log(k)
    h = np.clip(h, 0.0, 1.0)
    return _unwrap(h, p.ndim > 1)
