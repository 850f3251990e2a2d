"""Group sampling across modes, dual-context log-prob recording, rollout sharing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import HIGH_ENTROPY, NORMAL, LogProbTrace
from .environment import Query, verify
from .errors import ValidationError
from .policy import Context, PolicyParameters, sample_batch, score_batch

MODES = (NORMAL, HIGH_ENTROPY)


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    sampled_mode: str
    reward: float
    old_logprobs_normal: LogProbTrace | None
    old_logprobs_he: LogProbTrace | None
    query_id: int
    rollout_index: int
    entropies: np.ndarray  # per-token entropy (nats) of the sampling distribution

    def __post_init__(self):
        for trace in (self.old_logprobs_normal, self.old_logprobs_he):
            if trace is not None and len(trace) != len(self.tokens):
                raise ValidationError("trace length must equal token count")
        if self.reward not in (0.0, 1.0):
            raise ValidationError(f"reward must be 0.0 or 1.0, got {self.reward}")

    def trace(self, mode: str) -> LogProbTrace:
        trace = self.old_logprobs_normal if mode == NORMAL else self.old_logprobs_he
        if trace is None:
            raise ValidationError(f"rollout {self.rollout_index} of query {self.query_id} has no {mode} trace")
        return trace

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class RolloutGroup:
    query: Query
    rollouts: tuple[Rollout, ...]
    group_seed: int
    scoring_calls: int
    dual: bool

    def __post_init__(self):
        if any(r.query_id != self.query.id for r in self.rollouts):
            raise ValidationError("all rollouts in a group must share the query id")
        if self.dual:
            G = len(self.rollouts)
            if G % 2:
                raise ValidationError("dual-mode groups need an even size")
            modes = [r.sampled_mode for r in self.rollouts]
            if modes != [NORMAL] * (G // 2) + [HIGH_ENTROPY] * (G // 2):
                raise ValidationError("dual-mode groups hold G/2 normal then G/2 high-entropy rollouts")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    def __len__(self):
        return len(self.rollouts)


@dataclass(frozen=True)
class Assignment:
    """One loss term: which rollout, and which mode's loss (context, traces, advantage) applies."""

    rollout_index: int
    loss_mode: str


def rollout_rng(seed: int, query_id: int, rollout_index: int) -> np.random.Generator:
    """Per-rollout stream keyed by (seed, query id, rollout index) and nothing else."""
    return np.random.default_rng([seed, query_id, rollout_index])


def sample_groups(params: PolicyParameters, queries: Sequence[Query], G: int, max_len: int,
                  temperature: float, seeds: Sequence[int], dual: bool = True) -> list[RolloutGroup]:
    """Sample one group per query from a single parameter snapshot.

    dual=True: the first G/2 rollouts use the normal context and the last G/2
    the high-entropy context; every rollout is then re-scored under the other
    context so it carries both old-policy traces (2G scoring calls per group).
    dual=False: all G rollouts are normal-mode with a single trace (G calls).
    """
    if G < 2 or G % 2:
        raise ValidationError(f"group size must be even and >= 2, got {G}")
    vocab = params.vocab
    contexts, rngs, modes = [], [], []
    for q, seed in zip(queries, seeds):
        for i in range(G):
            mode = HIGH_ENTROPY if dual and i >= G // 2 else NORMAL
            contexts.append(Context(q.query_tokens, (), mode))
            rngs.append(rollout_rng(seed, q.id, i))
            modes.append(mode)
    samples = sample_batch(params, contexts, rngs, max_len, temperature)
    other = [None] * len(samples)
    if dual:
        items = [(c.with_mode(HIGH_ENTROPY if m == NORMAL else NORMAL), s.tokens)
                 for c, m, s in zip(contexts, modes, samples)]
        other = score_batch(params, items)
    groups = []
    k = 0
    for q, seed in zip(queries, seeds):
        rollouts = []
        for i in range(G):
            s, mode = samples[k], modes[k]
            reward = verify(q, s.tokens, vocab).reward
            if mode == NORMAL:
                normal_trace, he_trace = s.trace, other[k]
            else:
                normal_trace, he_trace = other[k], s.trace
            rollouts.append(Rollout(s.tokens, mode, reward, normal_trace, he_trace, q.id, i, s.entropies))
            k += 1
        groups.append(RolloutGroup(q, tuple(rollouts), seed, 2 * G if dual else G, dual))
    return groups


def sample_group(params: PolicyParameters, query: Query, G: int, max_len: int, temperature: float,
                 seed: int, dual: bool = True) -> RolloutGroup:
    return sample_groups(params, [query], G, max_len, temperature, [seed], dual)[0]


def build_training_assignments(group: RolloutGroup, sharing: bool) -> list[Assignment]:
    """Unshared (each rollout trained in its own mode) or shared (both modes per rollout)."""
    if not group.dual:
        return [Assignment(r.rollout_index, NORMAL) for r in group.rollouts]
    if sharing:
        return [Assignment(r.rollout_index, mode) for mode in MODES for r in group.rollouts]
    return [Assignment(r.rollout_index, r.sampled_mode) for r in group.rollouts]


def write_rollout_dump(path, groups: Sequence[RolloutGroup], params: PolicyParameters) -> None:
    """Debug dump: query_id, rollout_index, sampled_mode, reward, tokens (tab-separated)."""
    vocab = params.vocab
    with open(Path(path), "a", encoding="utf-8") as fh:
        for g in groups:
            for r in g.rollouts:
                fh.write(f"{r.query_id}\t{r.rollout_index}\t{r.sampled_mode}\t{r.reward:.1f}\t"
                         f"{' '.join(vocab.decode(r.tokens))}\n")
