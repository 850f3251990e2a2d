import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_split.core_math import HIGH_ENTROPY, NORMAL, exact_kl, finite_difference_gradient, relative_error
from policy_split.errors import IncompatibleCheckpointError, ValidationError
from policy_split.optim import AdamMoments, optimizer_update
from policy_split.policy import (
    MLP,
    TABULAR,
    Context,
    UnderTrainedWarning,
    Vocabulary,
    init_policy,
    load_checkpoint,
    mean_entropy_bits,
    next_token_distribution,
    sample_rollout,
    save_checkpoint,
    score_batch,
    score_sequence,
    step_distributions,
    supervised_pretrain,
    weighted_entropy_and_gradient,
    weighted_logprob_gradient,
)

from conftest import SMALL_MLP, SMALL_TABULAR, canonical_dataset, random_policy, small_corpus

QUERY = (1, 12, 2, 14, 3)  # "1 + 2 = 3"


def test_vocabulary_layout(vocab):
    assert vocab.size == 20
    assert vocab.n_out == 12
    assert vocab.decode(vocab.encode(["3", "ANS", "EOS"])) == ("3", "ANS", "EOS")
    assert vocab.prefix_ids(NORMAL) == ()
    assert all(t in vocab.reserved_ids for t in vocab.prefix_ids(HIGH_ENTROPY))
    # reserved tokens can never be sampled: the output range stops before them
    assert min(vocab.reserved_ids) >= vocab.n_out


def test_vocabulary_rejects_duplicate_prefixes():
    with pytest.raises(ValidationError):
        Vocabulary(("a", "b", "EOS", "c", "d", "e"), ("PAD",), ("r0", "r1"),
                   (("he", ("r0",)), ("x", ("r0",))))


def test_vocabulary_roundtrip(vocab):
    assert Vocabulary.from_dict(vocab.to_dict()) == vocab


def test_zero_tabular_is_uniform(vocab):
    p = init_policy(vocab)
    d = next_token_distribution(p, Context(QUERY))
    np.testing.assert_allclose(d.probs, np.full(vocab.n_out, 1 / vocab.n_out))
    tr = score_sequence(p, Context(QUERY), (0, 1, 11))
    np.testing.assert_allclose(tr.values, -math.log(vocab.n_out))


@pytest.mark.parametrize("arch", [TABULAR, MLP])
def test_untrained_policy_is_prefix_insensitive(arch):
    p = init_policy(architecture=arch, seed=3)
    a = next_token_distribution(p, Context(QUERY, (2,), NORMAL))
    b = next_token_distribution(p, Context(QUERY, (2,), HIGH_ENTROPY))
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)


def test_context_overflow():
    p = init_policy(dims=(6, 4, 4))
    with pytest.raises(ValidationError):
        next_token_distribution(p, Context(QUERY, (1, 2), HIGH_ENTROPY))


def test_out_of_vocabulary_token_rejected():
    p = init_policy()
    with pytest.raises(ValidationError):
        score_sequence(p, Context(QUERY), (0, 15))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([TABULAR, MLP]), st.sampled_from([NORMAL, HIGH_ENTROPY]))
def test_distributions_are_valid(seed, arch, mode):
    p = random_policy(arch, seed=seed, scale=3.0)
    probs = step_distributions(p, Context(QUERY, (), mode), (0, 1, 2))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([TABULAR, MLP]), st.sampled_from([NORMAL, HIGH_ENTROPY]),
       st.sampled_from([1.0, 0.6, 1.7]))
def test_sample_then_score_roundtrip(seed, arch, mode, temperature):
    p = random_policy(arch, seed=seed % 50)
    ctx = Context(QUERY, (), mode)
    s = sample_rollout(p, ctx, 6, temperature, np.random.default_rng(seed))
    again = score_sequence(p, ctx, s.tokens)
    assert np.max(np.abs(again.values - s.trace.values), initial=0.0) <= 1e-9


def test_sampling_is_deterministic():
    p = random_policy(seed=1)
    a = sample_rollout(p, Context(QUERY), 6, 1.0, np.random.default_rng(5))
    b = sample_rollout(p, Context(QUERY), 6, 1.0, np.random.default_rng(5))
    assert a.tokens == b.tokens


def test_low_temperature_is_greedy():
    p = random_policy(seed=2, scale=2.0)
    greedy = sample_rollout(p, Context(QUERY), 6, 1.0, np.random.default_rng(0), top_k=1)
    cold = sample_rollout(p, Context(QUERY), 6, 1e-4, np.random.default_rng(0))
    assert cold.tokens == greedy.tokens


def test_sampling_stops_at_eos_or_max_len(vocab):
    p = random_policy(seed=4)
    for s in range(20):
        r = sample_rollout(p, Context(QUERY), 5, 1.0, np.random.default_rng(s))
        assert 1 <= len(r) <= 5
        assert vocab.eos_id not in r.tokens[:-1]


def test_single_token_gradient_is_one_minus_p():
    p = init_policy(dims=(16, 1, 0))
    p = p.with_values(np.random.default_rng(0).normal(size=p.values.size))
    ctx = Context(QUERY)
    probs = next_token_distribution(p, ctx).probs
    grad = weighted_logprob_gradient(p, [(ctx, (4,), np.ones(1))])
    assert grad[4] == pytest.approx(1 - probs[4], abs=1e-12)
    np.testing.assert_allclose(np.delete(grad, 4), -np.delete(probs, 4), atol=1e-12)


def test_zero_weights_zero_gradient():
    p = random_policy()
    grad = weighted_logprob_gradient(p, [(Context(QUERY), (0, 1), np.zeros(2))])
    assert not grad.any()


def test_weight_shape_mismatch():
    with pytest.raises(ValidationError):
        weighted_logprob_gradient(random_policy(), [(Context(QUERY), (0, 1), np.ones(3))])


def _random_batch(rng, n=3):
    batch = []
    for _ in range(n):
        mode = (NORMAL, HIGH_ENTROPY)[int(rng.integers(2))]
        toks = tuple(int(t) for t in rng.integers(0, 12, size=int(rng.integers(1, 5))))
        batch.append((Context(QUERY, (), mode), toks, rng.normal(size=len(toks))))
    return batch


@pytest.mark.parametrize("arch", [TABULAR, MLP])
def test_logprob_gradient_matches_finite_differences(arch):
    for seed in range(25):
        rng = np.random.default_rng(seed)
        p = random_policy(arch, seed=seed)
        batch = _random_batch(rng)

        def f(v):
            q = p.with_values(v)
            return sum(float(np.dot(w, score_sequence(q, c, t).values)) for c, t, w in batch)

        fd = finite_difference_gradient(f, p.values)
        assert relative_error(weighted_logprob_gradient(p, batch), fd) < 1e-4


@pytest.mark.parametrize("arch", [TABULAR, MLP])
def test_entropy_gradient_matches_finite_differences(arch):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = random_policy(arch, seed=seed)
        batch = _random_batch(rng)

        def f(v):
            return weighted_entropy_and_gradient(p.with_values(v), batch)[0]

        _, g = weighted_entropy_and_gradient(p, batch)
        assert relative_error(g, finite_difference_gradient(f, p.values)) < 1e-4


def test_one_hot_policy_has_zero_entropy_gradient():
    p = init_policy(dims=(16, 1, 0))
    v = np.full(p.values.size, -60.0)
    v[3] = 60.0
    h, g = weighted_entropy_and_gradient(p.with_values(v), [(Context(QUERY), (3,), np.ones(1))])
    assert h == pytest.approx(0.0, abs=1e-40)
    assert np.abs(g).max() < 1e-40


@pytest.mark.parametrize("arch", [TABULAR, MLP])
def test_update_through_one_mode_moves_both(arch):
    p = init_policy(architecture=arch, dims=SMALL_TABULAR if arch == TABULAR else SMALL_MLP, seed=0)
    ctx_n, ctx_h = Context(QUERY, (), NORMAL), Context(QUERY, (), HIGH_ENTROPY)
    before = next_token_distribution(p, ctx_n).probs
    g = weighted_logprob_gradient(p, [(ctx_h, (3, 4), np.ones(2))])
    _, v = optimizer_update(AdamMoments.zeros(g.size), p.values, -g, 0.1)
    q = p.with_values(v)
    assert exact_kl(before, next_token_distribution(q, ctx_n).probs) > 0
    kl_modes = exact_kl(next_token_distribution(q, ctx_h).probs, next_token_distribution(q, ctx_n).probs)
    assert kl_modes > 0


def test_pretrain_memorises_and_lowers_entropy():
    queries = small_corpus(n=3)
    data = canonical_dataset(queries)
    p0 = init_policy(dims=(32, 1 << 16, 1 << 16))  # large table: no hash collisions among 15 contexts
    with warnings.catch_warnings():
        warnings.simplefilter("error", UnderTrainedWarning)
        p = supervised_pretrain(p0, data, 80, 0.1)
    assert mean_entropy_bits(p, data) < mean_entropy_bits(p0, data)
    assert mean_entropy_bits(p, data) < 0.5
    for ctx, tokens in data:
        greedy = sample_rollout(p, ctx, len(tokens), 1.0, np.random.default_rng(0), top_k=1)
        assert greedy.tokens == tokens


@pytest.mark.filterwarnings("ignore::policy_split.policy.UnderTrainedWarning")
def test_pretrain_leaves_modes_identical():
    data = canonical_dataset(small_corpus(n=3))
    p = supervised_pretrain(init_policy(), data, 20, 0.1)
    for ctx, tokens in data:
        a = step_distributions(p, ctx, tokens)
        b = step_distributions(p, ctx.with_mode(HIGH_ENTROPY), tokens)
        np.testing.assert_array_equal(a, b)


def test_pretrain_zero_steps_is_identity():
    p = random_policy()
    assert supervised_pretrain(p, [(Context(QUERY), (0,))], 0, 0.1) is p


def test_pretrain_warns_when_undertrained():
    data = canonical_dataset(small_corpus(n=3))
    with pytest.warns(UnderTrainedWarning):
        supervised_pretrain(init_policy(), data, 1, 0.01)


@pytest.mark.parametrize("arch", [TABULAR, MLP])
def test_checkpoint_roundtrip_is_byte_exact(tmp_path, arch):
    p = random_policy(arch, seed=7)
    extra = {"adam_m": np.arange(p.values.size, dtype=float)}
    save_checkpoint(tmp_path / "a.ckpt", p, "abc", extra, {"step": 3})
    q, arrays, header = load_checkpoint(tmp_path / "a.ckpt")
    np.testing.assert_array_equal(q.values, p.values)
    np.testing.assert_array_equal(arrays["adam_m"], extra["adam_m"])
    assert (q.architecture_tag, q.architecture_dims, q.vocab, q.version) == \
        (p.architecture_tag, p.architecture_dims, p.vocab, p.version)
    assert header["config_hash"] == "abc" and header["meta"] == {"step": 3}
    save_checkpoint(tmp_path / "b.ckpt", q, "abc", arrays, {"step": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, random_policy())
    data = bytearray(path.read_bytes())
    data[11] = 9  # format version field follows the 11-byte magic
    path.write_bytes(bytes(data))
    with pytest.raises(IncompatibleCheckpointError, match="version 9"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path)


def test_score_batch_matches_single_scoring():
    p = random_policy(MLP, seed=3)
    items = [(Context(QUERY, (), m), (0, 1, 2)) for m in (NORMAL, HIGH_ENTROPY)]
    for (ctx, toks), tr in zip(items, score_batch(p, items)):
        np.testing.assert_allclose(tr.values, score_sequence(p, ctx, toks).values, atol=1e-12)
        assert tr.context_tag == ctx.mode
