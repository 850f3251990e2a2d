"""Desk-scale experiment protocol shared by the acceptance suite and scripts/.

One run = generate a corpus, pretrain on canonical solutions, train one method,
then evaluate both modes on the training queries.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import analysis
from .core_math import HIGH_ENTROPY, NORMAL
from .environment import Query, TaskKind, canonical_solution, default_max_len, generate_corpus
from .policy import TABULAR, Context, PolicyParameters, default_dims, init_policy, supervised_pretrain
from .trainer import TrainConfig, TrainingState, train

CORPUS_SEED_BASE = 200


@dataclass
class Protocol:
    task_kind: str = TaskKind.MULTI_PATH_SUM.value
    difficulty: int = 2
    n_queries: int = 32
    pretrain_steps: int = 60
    pretrain_lr: float = 0.1
    steps: int = 200
    lr: float = 0.01
    eval_runs: int = 8
    best_of: int = 8
    kl_samples: int = 8
    architecture: str = TABULAR

    @property
    def max_len(self) -> int:
        return default_max_len(self.task_kind, self.difficulty)


@dataclass
class ModeEval:
    accuracy: float
    entropy_bits: float
    length: float
    best_of_n: float
    div_ngram: float
    div_bleu: float


@dataclass
class StepAudit:
    """Per-step structural checks collected during training."""

    steps: int = 0
    scoring_calls_ok: bool = True
    assignments_ok: bool = True
    max_ratio_deviation: float = 0.0
    finite: bool = True
    train_entropy: dict = field(default_factory=lambda: {NORMAL: [], HIGH_ENTROPY: []})


@dataclass
class RunResult:
    seed: int
    method: str
    pretrained: PolicyParameters
    params: PolicyParameters
    pretrained_eval: dict[str, ModeEval]
    final_eval: dict[str, ModeEval]
    kl_pretrained: float
    kl_final: float
    discoveries: dict[str, set]
    audit: StepAudit
    seconds: float


def make_corpus(protocol: Protocol, seed: int) -> list[Query]:
    return generate_corpus(CORPUS_SEED_BASE + seed, range(protocol.n_queries), protocol.task_kind,
                           protocol.difficulty)


def pretrain(protocol: Protocol, queries: Sequence[Query], seed: int) -> PolicyParameters:
    data = [(Context(q.query_tokens), canonical_solution(q, protocol.max_len)) for q in queries]
    params = init_policy(architecture=protocol.architecture, dims=default_dims(protocol.architecture), seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return supervised_pretrain(params, data, protocol.pretrain_steps, protocol.pretrain_lr)


def evaluate(params: PolicyParameters, queries: Sequence[Query], protocol: Protocol, seed: int,
             modes=(NORMAL, HIGH_ENTROPY)) -> dict[str, ModeEval]:
    out = {}
    for mode in modes:
        res = analysis.evaluate_mode(params, queries, mode, protocol.eval_runs, seed=seed)
        bon = analysis.best_of_n(params, queries, mode, protocol.best_of, seed=seed)
        ng, bl = analysis.diversity(params, queries, mode, protocol.eval_runs, seed=seed)
        out[mode] = ModeEval(res.accuracy, res.mean_entropy_bits, res.mean_length, bon, ng, bl)
    return out


def run(method: str, seed: int, protocol: Protocol | None = None, pretrained: PolicyParameters | None = None,
        **overrides) -> RunResult:
    protocol = protocol or Protocol()
    queries = make_corpus(protocol, seed)
    p0 = pretrained if pretrained is not None else pretrain(protocol, queries, seed)
    config = TrainConfig(method=method, seed=seed, max_len=protocol.max_len, lr=protocol.lr,
                         batch_queries=protocol.n_queries, **overrides)
    audit = StepAudit()
    expected_calls = 2 * config.group_size if config.dual else config.group_size
    expected_assign = (2 * config.group_size if config.dual and config.sharing else config.group_size)

    def check(state, report):
        audit.steps += 1
        audit.scoring_calls_ok &= all(g.scoring_calls == expected_calls for g in report.groups)
        audit.assignments_ok &= report.n_assignments == expected_assign * len(report.groups)
        audit.max_ratio_deviation = max(audit.max_ratio_deviation, report.max_ratio_deviation)
        audit.finite &= bool(np.isfinite(report.objective) and np.isfinite(report.grad_norm))
        for row in report.rows:
            audit.train_entropy[row["mode"]].append(row["mean_entropy_bits"])

    t0 = time.perf_counter()
    state = train(TrainingState(p0), queries, config, protocol.steps, callback=check)
    seconds = time.perf_counter() - t0
    return RunResult(
        seed=seed,
        method=method,
        pretrained=p0,
        params=state.params,
        pretrained_eval=evaluate(p0, queries, protocol, seed),
        final_eval=evaluate(state.params, queries, protocol, seed),
        kl_pretrained=analysis.inter_mode_kl(p0, queries, protocol.kl_samples, seed),
        kl_final=analysis.inter_mode_kl(state.params, queries, protocol.kl_samples, seed),
        discoveries={m: set(v) for m, v in state.discoveries.items()},
        audit=audit,
        seconds=seconds,
    )


def strict_superset(a: set, b: set) -> bool:
    return a > b
