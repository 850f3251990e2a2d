"""Synthetic verifiable-reward tasks.

Two task families share one response grammar::

    <step digit>* ANS <answer digits> EOS

ModularChain
    The query is ``x0 op1 x1 ... opd xd`` with ops in {+, *}. The steps must be
    the running values ``r_k = (r_{k-1} op_k x_k) mod 10`` for k = 1..d, and
    the answer is ``r_d``. Exactly one correct response exists.

MultiPathSum
    The query is ``a_1 ... a_n = T`` with distinct operands in 1..9. The steps
    are any ordering of any subset of the operands (each used at most once)
    summing to T, and the answer is T. Many responses are correct.

The verifier is a strict parser: any deviation earns 0.0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ResourceError, ValidationError
from .policy import Vocabulary, default_vocabulary


class TaskKind(str, Enum):
    MODULAR_CHAIN = "ModularChain"
    MULTI_PATH_SUM = "MultiPathSum"


DIFFICULTY_RANGE = {TaskKind.MODULAR_CHAIN: (1, 5), TaskKind.MULTI_PATH_SUM: (1, 4)}
MODULUS = 10
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class Query:
    id: int
    task_kind: TaskKind
    query_tokens: tuple[int, ...]
    target: int
    difficulty: int


@dataclass(frozen=True)
class VerifierResult:
    reward: float
    parsed_answer: int | None = None


def default_max_len(task_kind: TaskKind | str, difficulty: int) -> int:
    """Longest correct response for the difficulty (the generation budget)."""
    kind = TaskKind(task_kind)
    if kind is TaskKind.MODULAR_CHAIN:
        return difficulty + 3
    n = difficulty + 2
    return n + 4


def query_rng(seed: int, query_id: int) -> np.random.Generator:
    """Independent stream per (seed, query id)."""
    return np.random.default_rng([seed, query_id, 0x51E7])


def _digits(value: int) -> tuple[str, ...]:
    return tuple(str(value))


def _check_difficulty(kind: TaskKind, difficulty: int):
    lo, hi = DIFFICULTY_RANGE[kind]
    if not lo <= difficulty <= hi:
        raise ConfigError(f"{kind.value} difficulty must be in [{lo}, {hi}], got {difficulty}")


def generate_query(rng: np.random.Generator, task_kind: TaskKind | str, difficulty: int,
                   query_id: int = 0, max_len: int | None = None,
                   vocab: Vocabulary | None = None) -> Query:
    """Draw a query whose solution set (within max_len) is non-empty.

    MultiPathSum queries additionally need at least two distinct operand
    subsets reaching the target, so exploration has somewhere to go.
    """
    kind = TaskKind(task_kind)
    _check_difficulty(kind, difficulty)
    vocab = vocab or default_vocabulary()
    max_len = default_max_len(kind, difficulty) if max_len is None else max_len
    for _ in range(MAX_ATTEMPTS):
        if kind is TaskKind.MODULAR_CHAIN:
            operands = [int(x) for x in rng.integers(0, MODULUS, size=difficulty + 1)]
            ops = [("+", "*")[int(b)] for b in rng.integers(0, 2, size=difficulty)]
            names = [str(operands[0])]
            value = operands[0]
            for op, x in zip(ops, operands[1:]):
                names += [op, str(x)]
                value = (value + x) % MODULUS if op == "+" else (value * x) % MODULUS
            query = Query(query_id, kind, vocab.encode(names), value, difficulty)
        else:
            n = difficulty + 2
            operands = sorted(int(x) for x in rng.choice(np.arange(1, 10), size=n, replace=False))
            # targets reachable by at least two operand subsets, one of them multi-operand
            sums = {}
            for r in range(1, n + 1):
                for combo in itertools.combinations(operands, r):
                    sums.setdefault(sum(combo), []).append(r)
            targets = sorted(t for t, sizes in sums.items() if len(sizes) >= 2 and max(sizes) >= 2)
            if not targets:
                continue
            target = targets[int(rng.integers(len(targets)))]
            names = [str(x) for x in operands] + ["="] + list(_digits(target))
            query = Query(query_id, kind, vocab.encode(names), target, difficulty)
        if count_solutions(query, max_len, vocab) >= (2 if kind is TaskKind.MULTI_PATH_SUM else 1):
            return query
    raise ConfigError(f"no solvable {kind.value} query within max_len={max_len} after {MAX_ATTEMPTS} attempts")


def parse_query(query: Query, vocab: Vocabulary | None = None):
    """Decode query tokens to (operands, ops) for ModularChain or (operands, target) for MultiPathSum."""
    vocab = vocab or default_vocabulary()
    names = vocab.decode(query.query_tokens)
    if query.task_kind is TaskKind.MODULAR_CHAIN:
        operands = [int(n) for n in names[0::2]]
        ops = list(names[1::2])
        if len(ops) != query.difficulty or any(op not in "+*" for op in ops):
            raise ValidationError(f"malformed ModularChain query {names}")
        return operands, ops
    eq = names.index("=")
    operands = [int(n) for n in names[:eq]]
    target = int("".join(names[eq + 1:]))
    return operands, target


def verify(query: Query, response: Sequence[int], vocab: Vocabulary | None = None) -> VerifierResult:
    """Binary reward: 1.0 iff the response is a complete, correct derivation."""
    vocab = vocab or default_vocabulary()
    try:
        names = vocab.decode(response)
    except (IndexError, TypeError):
        return VerifierResult(0.0)
    if not names or names[-1] != vocab.eos or names.count(vocab.eos) != 1:
        return VerifierResult(0.0)
    body = names[:-1]
    if body.count("ANS") != 1:
        return VerifierResult(0.0)
    cut = body.index("ANS")
    steps, answer = body[:cut], body[cut + 1:]
    if not answer or not all(t.isdigit() for t in steps + answer):
        return VerifierResult(0.0)
    if len(answer) > 1 and answer[0] == "0":
        return VerifierResult(0.0)
    parsed = int("".join(answer))
    steps = [int(t) for t in steps]

    if query.task_kind is TaskKind.MODULAR_CHAIN:
        operands, ops = parse_query(query, vocab)
        if len(steps) != len(ops):
            return VerifierResult(0.0, parsed)
        value = operands[0]
        for op, x, s in zip(ops, operands[1:], steps):
            value = (value + x) % MODULUS if op == "+" else (value * x) % MODULUS
            if s != value:
                return VerifierResult(0.0, parsed)
        ok = parsed == value == query.target
    else:
        operands, target = parse_query(query, vocab)
        ok = (
            len(steps) >= 1
            and len(set(steps)) == len(steps)
            and all(s in operands for s in steps)
            and sum(steps) == target == parsed == query.target
        )
    return VerifierResult(1.0 if ok else 0.0, parsed)


def enumerate_solutions(query: Query, max_len: int, vocab: Vocabulary | None = None,
                        budget: int = 10 ** 8) -> set[tuple[int, ...]]:
    """All reward-1 responses of length <= max_len, by pruned depth-first search."""
    vocab = vocab or default_vocabulary()
    ans, eos = vocab.ids["ANS"], vocab.ids["EOS"]
    digit_ids = [vocab.ids[str(d)] for d in range(10)]
    answer = tuple(vocab.ids[c] for c in str(query.target))
    tail = (ans,) + answer + (eos,)
    solutions: set[tuple[int, ...]] = set()
    expanded = 0

    if query.task_kind is TaskKind.MODULAR_CHAIN:
        operands, ops = parse_query(query, vocab)

        def expand(prefix: tuple[int, ...], value: int):
            nonlocal expanded
            expanded += 1
            if expanded > budget:
                raise ResourceError("solution search budget exceeded; use a smaller difficulty")
            k = len(prefix)
            if k == len(ops):
                if k + len(tail) <= max_len and value == query.target:
                    solutions.add(prefix + tail)
                return
            if k + 1 + len(tail) > max_len:
                return
            for d, tok in enumerate(digit_ids):
                x = operands[k + 1]
                nxt = (value + x) % MODULUS if ops[k] == "+" else (value * x) % MODULUS
                if d == nxt:
                    expand(prefix + (tok,), nxt)

        expand((), operands[0])
    else:
        operands, target = parse_query(query, vocab)

        def expand(prefix: tuple[int, ...], used: frozenset[int], total: int):
            nonlocal expanded
            expanded += 1
            if expanded > budget:
                raise ResourceError("solution search budget exceeded; use a smaller difficulty")
            if prefix and total == target and len(prefix) + len(tail) <= max_len:
                solutions.add(prefix + tail)
            if len(prefix) + 1 + len(tail) > max_len:
                return
            for d, tok in enumerate(digit_ids):
                if d in operands and d not in used and total + d <= target:
                    expand(prefix + (tok,), used | {d}, total + d)

        expand((), frozenset(), 0)
    return solutions


def count_solutions(query: Query, max_len: int, vocab: Vocabulary | None = None) -> int:
    """Closed-form solution count, independent of the search in enumerate_solutions."""
    vocab = vocab or default_vocabulary()
    tail_len = 2 + len(str(query.target))
    if query.task_kind is TaskKind.MODULAR_CHAIN:
        _, ops = parse_query(query, vocab)
        return 1 if len(ops) + tail_len <= max_len else 0
    operands, target = parse_query(query, vocab)
    return sum(
        math.factorial(r)
        for r in range(1, len(operands) + 1)
        if r + tail_len <= max_len
        for combo in itertools.combinations(operands, r)
        if sum(combo) == target
    )


def canonical_solution(query: Query, max_len: int | None = None, vocab: Vocabulary | None = None) -> tuple[int, ...]:
    """Lexicographically smallest correct response (by token id)."""
    max_len = default_max_len(query.task_kind, query.difficulty) if max_len is None else max_len
    return min(enumerate_solutions(query, max_len, vocab))


def generate_corpus(seed: int, ids: Iterable[int], task_kind: TaskKind | str, difficulty: int,
                    max_len: int | None = None, vocab: Vocabulary | None = None) -> list[Query]:
    return [generate_query(query_rng(seed, i), task_kind, difficulty, i, max_len, vocab) for i in ids]


# --------------------------------------------------------------------------- query-set files


def write_query_set(path, queries: Sequence[Query], vocab: Vocabulary | None = None) -> None:
    """One line per query: id, task kind, difficulty, query tokens, target (tab-separated)."""
    vocab = vocab or default_vocabulary()
    lines = [
        f"{q.id}\t{q.task_kind.value}\t{q.difficulty}\t{' '.join(vocab.decode(q.query_tokens))}\t{q.target}\n"
        for q in queries
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_query_set(path, vocab: Vocabulary | None = None) -> list[Query]:
    vocab = vocab or default_vocabulary()
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        qid, kind, difficulty, tokens, target = parts
        queries.append(Query(int(qid), TaskKind(kind), vocab.encode(tokens.split(" ")), int(target), int(difficulty)))
    return queries
