"""Entropy and KL estimators, standardization, clipping and finite differences.

Everything here works in nats; conversion to bits happens only where
results are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ValidationError

NORMAL = "normal"
HIGH_ENTROPY = "he"

LN2 = math.log(2.0)

_PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probabilities over a finite vocabulary, validated on construction."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValidationError("probs must be a non-empty 1-d array")
        if not np.all(np.isfinite(probs)):
            raise ValidationError("probs contains non-finite values")
        if np.any(probs < 0):
            raise ValidationError(f"probs must be non-negative (min {probs.min():.3g})")
        total = float(probs.sum())
        if abs(total - 1.0) > _PROB_SUM_TOL:
            raise ValidationError(f"probs must sum to 1 within 1e-9 (sum {total!r})")
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.probs.size


@dataclass(frozen=True)
class LogProbTrace:
    """Per-token log-probabilities of a response under one context."""

    values: np.ndarray
    context_tag: str = NORMAL

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValidationError("trace values must be 1-d")
        if np.any(values > 1e-12):
            raise ValidationError("log-probabilities must be <= 0")
        object.__setattr__(self, "values", np.minimum(values, 0.0))

    def __len__(self):
        return self.values.size


def _as_probs(dist) -> np.ndarray:
    if isinstance(dist, CategoricalDistribution):
        return dist.probs
    return CategoricalDistribution(np.asarray(dist, dtype=np.float64)).probs


def exact_entropy(dist, base: str = "nats") -> float:
    """Shannon entropy -sum p log p, with 0 log 0 = 0."""
    probs = _as_probs(dist)
    nz = probs[probs > 0]
    h = float(-np.sum(nz * np.log(nz)))
    if base == "nats":
        return h
    if base == "bits":
        return h / LN2
    raise ValidationError(f"unknown base {base!r}; expected 'bits' or 'nats'")


def sampled_entropy_estimate(trace) -> float:
    """Monte-carlo entropy in nats: mean negative log-probability of samples."""
    values = trace.values if isinstance(trace, LogProbTrace) else np.asarray(trace, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("cannot estimate entropy from an empty trace")
    return float(-values.mean())


def exact_kl(p, q) -> float:
    """KL(p || q) in nats. Raises DomainError if q misses support of p."""
    p = _as_probs(p)
    q = _as_probs(q)
    if p.shape != q.shape:
        raise ValidationError(f"distribution sizes differ: {p.size} vs {q.size}")
    support = p > 0
    bad = np.flatnonzero(support & (q <= 0))
    if bad.size:
        raise DomainError(
            f"q assigns zero probability to token {int(bad[0])} where p > 0",
            index=int(bad[0]),
        )
    kl = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return max(kl, 0.0)


def k1_kl_estimate(trace_p, trace_q) -> float:
    """k1 estimator of KL(p || q) from samples of p: mean(log p - log q)."""
    vp = trace_p.values if isinstance(trace_p, LogProbTrace) else np.asarray(trace_p, dtype=np.float64)
    vq = trace_q.values if isinstance(trace_q, LogProbTrace) else np.asarray(trace_q, dtype=np.float64)
    if vp.shape != vq.shape:
        raise ValidationError(f"trace lengths differ: {vp.size} vs {vq.size}")
    if vp.size == 0:
        raise ValidationError("cannot estimate KL from empty traces")
    return float(np.mean(vp - vq))


def standardize(values, epsilon: float = 1e-8) -> np.ndarray:
    """(v - mean) / std with population std; all zeros when std < epsilon."""
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("cannot standardize an empty array")
    centered = v - v.mean()
    std = float(np.sqrt(np.mean(centered * centered)))
    if std < epsilon or std == 0.0:
        return np.zeros_like(v)
    return centered / max(std, epsilon)


def symmetric_clip(value, bound):
    """Clamp value into [-bound, bound]. Works elementwise on arrays."""
    if np.any(np.asarray(bound) < 0):
        raise ValidationError("clip bound must be >= 0")
    return np.minimum(np.maximum(value, -np.asarray(bound)), bound)


def finite_difference_gradient(objective: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValidationError("step h must be > 0")
    x = np.array(params, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        f_plus = objective(x.copy())
        x[i] = orig - h
        f_minus = objective(x.copy())
        x[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"objective is non-finite at coordinate {i}", {"index": i})
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy in nats of each row of a probability matrix."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def row_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p_i || q_i) in nats for each row; q must cover p's support."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
