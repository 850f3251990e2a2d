import dataclasses
import functools
import warnings

import numpy as np
import pytest

from policy_split.core_math import NORMAL
from policy_split.environment import TaskKind, canonical_solution, generate_corpus
from policy_split.policy import TABULAR, Context, default_vocabulary, init_policy, supervised_pretrain

SMALL_TABULAR = (16, 4, 4)
SMALL_MLP = (2, 7, 7, 3, 4)


@pytest.fixture
def vocab():
    return default_vocabulary()


def random_policy(architecture=TABULAR, dims=None, seed=0, scale=1.0):
    """Small policy with random (not zero) parameters."""
    dims = dims or (SMALL_TABULAR if architecture == TABULAR else SMALL_MLP)
    p = init_policy(architecture=architecture, dims=dims, seed=seed)
    rng = np.random.default_rng([seed, 99])
    return p.with_values(p.values + scale * rng.normal(size=p.values.size))


def small_corpus(seed=0, n=4, kind=TaskKind.MULTI_PATH_SUM, difficulty=1):
    return generate_corpus(seed, range(n), kind, difficulty)


def canonical_dataset(queries):
    return [(Context(q.query_tokens, (), NORMAL), canonical_solution(q)) for q in queries]


@functools.lru_cache(maxsize=None)
def warm_policy(seed=0, n=4, steps=20, noise=0.3):
    """Briefly pretrained policy with perturbed mode rows: mixed rewards, distinct modes."""
    qs = small_corpus(n=n)
    p = init_policy(dims=(16, 256, 256))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = supervised_pretrain(p, canonical_dataset(qs), steps, 0.1)
    mask = p.arch.mode_param_mask()
    values = p.values.copy()
    values[mask] += noise * np.random.default_rng([seed, 7]).normal(size=int(mask.sum()))
    return p.with_values(values)


def with_rewards(groups, pattern):
    """Copies of groups whose rollout rewards follow `pattern` (test fixtures only)."""
    out = []
    for g in groups:
        rollouts = tuple(dataclasses.replace(r, reward=float(pattern[i % len(pattern)]))
                         for i, r in enumerate(g.rollouts))
        out.append(dataclasses.replace(g, rollouts=rollouts))
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
