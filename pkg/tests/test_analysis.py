import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import canonical_dataset, small_corpus, warm_policy
from policy_split.analysis import (
    REPORT_COLUMNS,
    analyze,
    best_of_n,
    bleu,
    div_bleu,
    div_ngram,
    evaluate_mode,
    inter_mode_k1,
    inter_mode_kl,
    ngram_ratio,
    prompt_generalization_probe,
    sample_eval,
    summary_table,
    write_report,
)
from policy_split.core_math import HIGH_ENTROPY, NORMAL, exact_entropy
from policy_split.environment import TaskKind
from policy_split.errors import ConfigError, ValidationError
from policy_split.policy import HE_REWRITTEN, Context, init_policy, step_distributions, supervised_pretrain


# ---------------------------------------------------------------- diversity metrics


def test_ngram_ratio():
    assert ngram_ratio("a a a a".split()) == pytest.approx(1 / 3)
    assert ngram_ratio([1, 2, 3, 4]) == 1.0
    assert ngram_ratio([1]) == 0.0
    assert div_ngram([[1, 1, 1, 1]] * 8) == pytest.approx(1 / 3)
    assert div_ngram([[1, 2, 3], [5]]) == pytest.approx(0.5)


def test_bleu_identical_and_disjoint():
    seqs = [tuple(range(5))] * 8
    assert div_bleu(seqs) == 0.0
    assert bleu((1, 2, 3, 4, 5), [(1, 2, 3, 4, 5)]) == pytest.approx(1.0)
    disjoint = [tuple(range(40 * i, 40 * i + 40)) for i in range(8)]
    # every order has zero matches: smoothed precisions 1/41, 1/40, 1/39, 1/38
    expected = 1.0 - (41 * 40 * 39 * 38) ** -0.25
    assert div_bleu(disjoint) == pytest.approx(expected, rel=1e-12)
    assert div_bleu(disjoint) > 0.95


def test_bleu_brevity_penalty():
    # hypothesis is a prefix of the reference: all precisions 1, penalty exp(1 - 8/4)
    assert bleu((1, 2, 3, 4), [(1, 2, 3, 4, 5, 6, 7, 8)]) == pytest.approx(math.exp(-1.0))


def test_bleu_short_hypothesis_skips_empty_orders():
    # two tokens: only 1- and 2-gram orders exist, both fully matched
    assert bleu((1, 2), [(1, 2)]) == pytest.approx(1.0)


def test_div_bleu_needs_two():
    with pytest.raises(ValidationError):
        div_bleu([(1, 2)])


sequences = st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=7), min_size=8, max_size=8)


@settings(max_examples=60, deadline=None)
@given(sequences, st.randoms())
def test_diversity_permutation_invariant_and_bounded(seqs, rnd):
    shuffled = list(seqs)
    rnd.shuffle(shuffled)
    a, b = div_bleu(seqs), div_bleu(shuffled)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0
    assert div_ngram(seqs) == pytest.approx(div_ngram(shuffled), abs=1e-12)
    assert 0.0 <= div_ngram(seqs) <= 1.0


# ---------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def memorized():
    qs = small_corpus(n=6, kind=TaskKind.MODULAR_CHAIN, difficulty=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = supervised_pretrain(init_policy(dims=(32, 1 << 14, 1 << 14)), canonical_dataset(qs), 150, 0.1)
    return p, qs


def test_memorized_policy_is_accurate(memorized):
    p, qs = memorized
    res = evaluate_mode(p, qs, NORMAL, runs=8)
    assert res.accuracy == 1.0
    assert res.mean_entropy_bits < 0.5
    lengths = [len(canonical_dataset([q])[0][1]) for q in qs]
    assert res.mean_length == pytest.approx(np.mean(lengths))


def test_one_hot_policy_has_zero_entropy():
    base = init_policy(dims=(16, 64, 0))
    table = np.full((base.values.size // 12, 12), -60.0)
    table[:, 3] = 60.0
    res = evaluate_mode(base.with_values(table.ravel()), small_corpus(n=2), NORMAL, runs=2)
    assert res.mean_entropy_bits == pytest.approx(0.0, abs=1e-12)


def test_entropy_report_matches_exact_entropy():
    p = warm_policy()
    q = small_corpus(n=1)[0]
    samples = sample_eval(p, [q], HIGH_ENTROPY, runs=1, max_len=3)
    tokens = samples[q.id][0][0]
    dists = step_distributions(p, Context(q.query_tokens, (), HIGH_ENTROPY), tokens)
    ref = np.mean([exact_entropy(d, base="bits") for d in dists])
    res = evaluate_mode(p, [q], HIGH_ENTROPY, runs=1, max_len=3)
    assert res.mean_entropy_bits == pytest.approx(ref, abs=1e-12)


def test_best_of_n_nesting():
    p = warm_policy()
    qs = small_corpus(n=4)
    values = [best_of_n(p, qs, NORMAL, n) for n in (1, 2, 4, 8)]
    assert values == sorted(values)
    assert values[0] == evaluate_mode(p, qs, NORMAL, runs=1).accuracy
    assert values[-1] >= evaluate_mode(p, qs, NORMAL, runs=8).accuracy


def test_best_of_one_matches_accuracy_over_seeds():
    p = warm_policy()
    qs = small_corpus(n=4)
    bo1 = np.mean([best_of_n(p, qs, NORMAL, 1, seed=s) for s in range(30)])
    acc = evaluate_mode(p, qs, NORMAL, runs=8).accuracy
    assert abs(bo1 - acc) < 0.15


def test_modes_share_random_numbers():
    p = init_policy(dims=(16, 64, 64))
    qs = small_corpus(n=2)
    a = sample_eval(p, qs, NORMAL, 3)
    b = sample_eval(p, qs, HIGH_ENTROPY, 3)
    assert all([t for t, _, _ in a[q.id]] == [t for t, _, _ in b[q.id]] for q in qs)


# ---------------------------------------------------------------- KL


def test_kl_zero_for_untrained_policy():
    assert inter_mode_kl(init_policy(), small_corpus(n=3)) == pytest.approx(0.0, abs=1e-9)


def test_exact_kl_agrees_with_k1():
    p = warm_policy(noise=1.0)
    qs = small_corpus(n=4)
    exact = inter_mode_kl(p, qs, samples_per_query=64, seed=3)
    k1, se = inter_mode_k1(p, qs, samples_per_query=64, seed=3)
    assert exact > 0.01
    assert abs(exact - k1) < 4 * se


# ---------------------------------------------------------------- probes and reports


def test_probe_on_untrained_policy():
    out = prompt_generalization_probe(init_policy(), small_corpus(n=2), runs=2)
    assert set(out) == {HIGH_ENTROPY, HE_REWRITTEN, "le"}
    for _, _, delta in out.values():
        assert delta == pytest.approx(0.0, abs=1e-12)


def test_probe_collision():
    with pytest.raises(ConfigError):
        prompt_generalization_probe(init_policy(), small_corpus(n=1), prefixes=(HE_REWRITTEN,),
                                    trained=(HIGH_ENTROPY, HE_REWRITTEN), runs=1)


def test_analyze_and_report(tmp_path):
    p = warm_policy()
    records = analyze(p, small_corpus(n=3), "ckpt", runs=4, n=4)
    assert [r.mode for r in records] == [NORMAL, HIGH_ENTROPY, HE_REWRITTEN, "le"]
    assert all(r.best_of_n >= r.accuracy for r in records)
    write_report(tmp_path / "r.csv", records)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == list(REPORT_COLUMNS)
    assert len(lines) == 5
    text = summary_table(records)
    assert "KL(he||normal)" in text
