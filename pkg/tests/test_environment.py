import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_split.environment import (
    Query,
    TaskKind,
    canonical_solution,
    count_solutions,
    default_max_len,
    enumerate_solutions,
    generate_corpus,
    generate_query,
    parse_query,
    query_rng,
    read_query_set,
    verify,
    write_query_set,
)
from policy_split.errors import ConfigError, ResourceError, ValidationError


def q_mc(names, target, vocab):
    return Query(0, TaskKind.MODULAR_CHAIN, vocab.encode(names), target, (len(names) - 1) // 2)


def q_mps(operands, target, vocab):
    names = [str(x) for x in operands] + ["="] + list(str(target))
    return Query(0, TaskKind.MULTI_PATH_SUM, vocab.encode(names), target, len(operands) - 2)


def resp(vocab, s):
    return vocab.encode(s.split())


def test_modular_chain_verifier(vocab):
    q = q_mc(["7", "+", "5", "*", "3"], 6, vocab)  # 7+5=12->2, 2*3=6
    assert verify(q, resp(vocab, "2 6 ANS 6 EOS"), vocab).reward == 1.0
    assert verify(q, resp(vocab, "2 6 ANS 6 EOS"), vocab).parsed_answer == 6
    for bad in ("2 5 ANS 6 EOS", "2 6 ANS 5 EOS", "2 6 ANS 6", "2 6 ANS 6 EOS EOS", "6 ANS 6 EOS",
                "2 6 6 EOS", "2 6 ANS ANS 6 EOS", "2 6 ANS 0 6 EOS", "EOS"):
        assert verify(q, resp(vocab, bad), vocab).reward == 0.0, bad


def test_multi_path_sum_verifier(vocab):
    q = q_mps([1, 2, 3, 4], 5, vocab)
    for good in ("1 4 ANS 5 EOS", "4 1 ANS 5 EOS", "2 3 ANS 5 EOS", "3 2 ANS 5 EOS"):
        assert verify(q, resp(vocab, good), vocab).reward == 1.0, good
    for bad in ("5 ANS 5 EOS", "1 1 3 ANS 5 EOS", "1 4 ANS 6 EOS", "ANS 5 EOS", "1 4 ANS 5"):
        assert verify(q, resp(vocab, bad), vocab).reward == 0.0, bad


def test_two_digit_targets(vocab):
    q = q_mps([3, 5, 7, 9], 12, vocab)
    assert verify(q, resp(vocab, "3 9 ANS 1 2 EOS"), vocab).reward == 1.0
    assert count_solutions(q, 7, vocab) == 4  # {3,9} and {5,7}, each in two orders
    assert count_solutions(q, 5, vocab) == 0


@pytest.mark.parametrize("kind,difficulty", [(TaskKind.MODULAR_CHAIN, d) for d in range(1, 6)]
                         + [(TaskKind.MULTI_PATH_SUM, d) for d in range(1, 5)])
def test_search_agrees_with_closed_form(kind, difficulty, vocab):
    for i in range(6):
        q = generate_query(query_rng(11, i), kind, difficulty, i)
        L = default_max_len(kind, difficulty)
        sols = enumerate_solutions(q, L, vocab)
        assert len(sols) == count_solutions(q, L, vocab)
        assert all(verify(q, s, vocab).reward == 1.0 for s in sols)
        assert canonical_solution(q) == min(sols)


def test_search_is_complete_on_tiny_instance(vocab):
    """Brute force over every token string of length <= 5 finds exactly the search's solutions."""
    q = q_mps([1, 2, 3], 3, vocab)
    outputs = range(vocab.n_out)
    brute = {s for n in range(1, 6) for s in itertools.product(outputs, repeat=n) if verify(q, s, vocab).reward}
    assert brute == enumerate_solutions(q, 5, vocab)


def test_multi_path_queries_have_several_subsets(vocab):
    for q in generate_corpus(3, range(20), TaskKind.MULTI_PATH_SUM, 2):
        operands, target = parse_query(q, vocab)
        subsets = [c for r in range(1, len(operands) + 1) for c in itertools.combinations(operands, r)
                   if sum(c) == target]
        assert len(subsets) >= 2 and max(map(len, subsets)) >= 2


def test_generation_is_deterministic():
    a = generate_corpus(5, range(10), TaskKind.MODULAR_CHAIN, 3)
    b = generate_corpus(5, range(10), TaskKind.MODULAR_CHAIN, 3)
    assert a == b
    assert generate_corpus(5, [7], TaskKind.MODULAR_CHAIN, 3)[0] == a[7]


def test_bad_difficulty():
    with pytest.raises(ConfigError):
        generate_query(query_rng(0, 0), TaskKind.MULTI_PATH_SUM, 9)


def test_unsolvable_budget_raises():
    rng = query_rng(0, 0)
    with pytest.raises(ConfigError):
        generate_query(rng, TaskKind.MODULAR_CHAIN, 3, max_len=3)


def test_search_budget():
    q = generate_query(query_rng(0, 0), TaskKind.MULTI_PATH_SUM, 4)
    with pytest.raises(ResourceError):
        enumerate_solutions(q, default_max_len(q.task_kind, q.difficulty), budget=10)


def test_query_set_roundtrip(tmp_path):
    qs = generate_corpus(1, range(5), TaskKind.MULTI_PATH_SUM, 3) + generate_corpus(1, range(5, 8), "ModularChain", 2)
    write_query_set(tmp_path / "q.tsv", qs)
    assert read_query_set(tmp_path / "q.tsv") == qs


def test_query_set_malformed(tmp_path):
    (tmp_path / "q.tsv").write_text("1\tModularChain\t2\n")
    with pytest.raises(ValidationError, match=":1:"):
        read_query_set(tmp_path / "q.tsv")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 11), min_size=0, max_size=8), st.integers(0, 50))
def test_verifier_never_crashes(tokens, qid):
    q = generate_query(query_rng(2, qid), TaskKind.MULTI_PATH_SUM, 2, qid)
    assert verify(q, tuple(tokens)).reward in (0.0, 1.0)
