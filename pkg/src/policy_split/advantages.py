"""Advantage computations: group normalisation, the clamped entropy bonus, and
the entropy-as-weight baseline transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_math import LogProbTrace, standardize, symmetric_clip
from .errors import ConfigError, ValidationError

CORRECTNESS_ONLY = "CorrectnessOnly"
ENTROPY_REGULARIZED = "EntropyRegularized"

STD_EPSILON = 1e-8


@dataclass(frozen=True)
class AdvantageTable:
    """Per-assignment per-token advantages with a provenance tag."""

    values: tuple[np.ndarray, ...]
    provenance: str

    def __post_init__(self):
        for v in self.values:
            if not np.all(np.isfinite(v)):
                raise ValidationError("advantages must be finite")


@dataclass(frozen=True)
class EntropySignalTable:
    """Raw b values and their group-standardised B, split back per rollout."""

    b: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]


def grpo_advantages(rewards, epsilon: float = STD_EPSILON) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValidationError("a group needs at least 2 rewards")
    return standardize(rewards, epsilon)


def b_values(he_trace, normal_trace, alpha: float) -> np.ndarray:
    """b_t = -alpha log pi_HE(o_t) - (1 - alpha) log pi(o_t)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    he = he_trace.values if isinstance(he_trace, LogProbTrace) else np.asarray(he_trace, dtype=np.float64)
    nm = normal_trace.values if isinstance(normal_trace, LogProbTrace) else np.asarray(normal_trace, dtype=np.float64)
    if he.shape != nm.shape:
        raise ValidationError(f"trace lengths differ: {he.size} vs {nm.size}")
    return -alpha * he - (1.0 - alpha) * nm


def standardize_b(b_per_rollout: Sequence[np.ndarray], epsilon: float = STD_EPSILON) -> EntropySignalTable:
    """Standardise b over the pooled tokens of the whole group."""
    parts = [np.asarray(b, dtype=np.float64) for b in b_per_rollout]
    pooled = np.concatenate(parts) if parts else np.zeros(0)
    if pooled.size == 0:
        raise ValidationError("cannot standardise an empty b pool")
    B = standardize(pooled, epsilon)
    out, i = [], 0
    for p in parts:
        out.append(B[i: i + p.size])
        i += p.size
    return EntropySignalTable(tuple(parts), tuple(out))


def he_advantages(A, B, eta: float, kappa: float) -> np.ndarray:
    """A + eta * clip(B, +-|A| / kappa). B is treated as a constant."""
    if kappa < 1:
        raise ConfigError(f"kappa must be >= 1, got {kappa}")
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    A, B = np.broadcast_arrays(np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64))
    out = A + eta * symmetric_clip(B, np.abs(A) / kappa)
    # rounding A + bonus can overshoot the bound by an ulp; step back toward A until it holds
    bound = eta * np.abs(A) / kappa
    over = np.abs(out - A) > bound
    while np.any(over):
        out = np.where(over, np.nextafter(out, A), out)
        over = np.abs(out - A) > bound
    return out


def entropy_advantage_bonus(A, entropies, coef: float, kappa: float) -> np.ndarray:
    """Single-mode entropy advantage: A + min(coef * H_t, |A| / kappa), H_t detached."""
    if kappa < 1:
        raise ConfigError(f"kappa must be >= 1, got {kappa}")
    A, H = np.broadcast_arrays(np.asarray(A, dtype=np.float64), np.asarray(entropies, dtype=np.float64))
    return A + np.minimum(coef * H, np.abs(A) / kappa)


def forking_token_mask(entropies, keep_fraction: float) -> np.ndarray:
    """1 for the ceil(keep_fraction * N) highest-entropy tokens, earlier positions winning ties."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    h = np.asarray(entropies, dtype=np.float64)
    n_keep = math.ceil(keep_fraction * h.size - 1e-12)
    order = np.lexsort((np.arange(h.size), -h))
    mask = np.zeros(h.size)
    mask[order[:n_keep]] = 1.0
    return mask


def entropy_driven_scale(advantages, sequence_entropies, floor: float = 0.1) -> np.ndarray:
    """Divide each sequence's advantage by its min-max normalised entropy (floored)."""
    adv = np.asarray(advantages, dtype=np.float64)
    h = np.asarray(sequence_entropies, dtype=np.float64)
    if adv.shape != h.shape:
        raise ValidationError("one entropy per sequence advantage is required")
    spread = h.max() - h.min() if h.size else 0.0
    if spread < 1e-12:
        norm = np.ones_like(h)
    else:
        norm = (h - h.min()) / spread
    return adv / np.maximum(norm, floor)


def clip_cov_mask(advantages, logprobs, clip_ratio: float, lower: float, upper: float,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Exclude floor(N * clip_ratio) tokens whose centred covariance term lies in [lower, upper].

    The covariance term is (A_t - mean A)(log pi_t - mean log pi), centred over
    the whole batch; candidates are chosen uniformly at random.
    """
    if not 0.0 < clip_ratio < 1.0:
        raise ConfigError(f"clip_ratio must be in (0, 1), got {clip_ratio}")
    a = np.asarray(advantages, dtype=np.float64)
    lp = np.asarray(logprobs, dtype=np.float64)
    mask = np.ones(a.size)
    n_clip = int(math.floor(a.size * clip_ratio))
    if n_clip == 0 or a.size == 0:
        return mask
    cov = (a - a.mean()) * (lp - lp.mean())
    candidates = np.flatnonzero((cov >= lower) & (cov <= upper))
    if candidates.size == 0:
        return mask
    rng = rng or np.random.default_rng(0)
    chosen = rng.permutation(candidates)[:n_clip]
    mask[chosen] = 0.0
    return mask
