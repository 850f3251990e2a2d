"""Evaluation and analysis: per-mode accuracy/entropy/length, inter-mode KL,
best-of-N, diversity metrics and prefix probes."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import HIGH_ENTROPY, LN2, NORMAL, row_kl
from .environment import Query, default_max_len, verify
from .errors import ConfigError, ValidationError
from .policy import HE_REWRITTEN, LOW_ENTROPY, Context, PolicyParameters, batch_step_distributions, sample_batch

EVAL_TEMPERATURE = 0.6
EVAL_TOP_K = 20
EVAL_TOP_P = 0.95
PROBE_PREFIXES = (HIGH_ENTROPY, HE_REWRITTEN, LOW_ENTROPY)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    mean_entropy_bits: float
    mean_length: float


@dataclass(frozen=True)
class MetricsRecord:
    checkpoint_id: str
    mode: str
    accuracy: float
    mean_entropy_bits: float
    mean_length: float
    forward_kl_he_from_normal: float
    best_of_n: float
    div_ngram: float
    div_bleu: float

    def __post_init__(self):
        for name in ("accuracy", "best_of_n", "div_ngram", "div_bleu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.mean_entropy_bits < 0 or self.mean_length < 0:
            raise ValidationError("entropy and length must be non-negative")


def eval_rng(seed: int, query_id: int, run: int) -> np.random.Generator:
    """Stream for one evaluation sample.

    Run r is shared by every N >= r, so best-of-N nests. The stream does not
    depend on the mode, so mode comparisons use common random numbers.
    """
    return np.random.default_rng([seed, query_id, run, 0xE7A1])


def sample_eval(params: PolicyParameters, queries: Sequence[Query], mode: str, runs: int, seed: int = 0,
                temperature: float = EVAL_TEMPERATURE, top_k: int | None = EVAL_TOP_K,
                top_p: float | None = EVAL_TOP_P, max_len: int | None = None):
    """runs samples per query; returns {query_id: [(tokens, reward, entropies_nats), ...]}."""
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    by_len: dict[int, list[Query]] = {}
    for q in queries:
        L = max_len if max_len is not None else default_max_len(q.task_kind, q.difficulty)
        by_len.setdefault(L, []).append(q)
    out = {q.id: [] for q in queries}
    for L, qs in sorted(by_len.items()):
        contexts, rngs, owners = [], [], []
        for q in qs:
            for r in range(runs):
                contexts.append(Context(q.query_tokens, (), mode))
                rngs.append(eval_rng(seed, q.id, r))
                owners.append(q)
        samples = sample_batch(params, contexts, rngs, L, temperature, top_k, top_p)
        for q, s in zip(owners, samples):
            out[q.id].append((s.tokens, verify(q, s.tokens, params.vocab).reward, s.entropies))
    return out


def evaluate_mode(params: PolicyParameters, queries: Sequence[Query], mode: str = NORMAL, runs: int = 8,
                  temperature: float = EVAL_TEMPERATURE, seed: int = 0, **kw) -> EvalResult:
    """Accuracy over runs x queries; entropy is the policy's exact step entropy (bits)
    pooled over every generated position."""
    samples = sample_eval(params, queries, mode, runs, seed, temperature, **kw)
    return _summarise(samples)


def _summarise(samples) -> EvalResult:
    flat = [s for group in samples.values() for s in group]
    rewards = [r for _, r, _ in flat]
    ents = np.concatenate([e for _, _, e in flat])
    return EvalResult(float(np.mean(rewards)), float(ents.mean() / LN2), float(np.mean([len(t) for t, _, _ in flat])))


def best_of_n(params: PolicyParameters, queries: Sequence[Query], mode: str = NORMAL, n: int = 8,
              seed: int = 0, temperature: float = EVAL_TEMPERATURE, **kw) -> float:
    if n < 1:
        raise ValidationError("n must be >= 1")
    samples = sample_eval(params, queries, mode, n, seed, temperature, **kw)
    return float(np.mean([any(r == 1.0 for _, r, _ in group) for group in samples.values()]))


def _he_samples(params, queries, samples_per_query, seed, max_len=None):
    return sample_eval(params, queries, HIGH_ENTROPY, samples_per_query, seed, 1.0, None, None, max_len)


def inter_mode_kl(params: PolicyParameters, queries: Sequence[Query], samples_per_query: int = 8,
                  seed: int = 0, max_len: int | None = None) -> float:
    """Exact KL(pi_HE || pi) per visited position, averaged over high-entropy samples (T = 1)."""
    if samples_per_query < 1:
        raise ValidationError("need at least one rollout per query")
    samples = _he_samples(params, queries, samples_per_query, seed, max_len)
    he_items, nm_items = [], []
    for q in queries:
        for tokens, _, _ in samples[q.id]:
            he_items.append((Context(q.query_tokens, (), HIGH_ENTROPY), tokens))
            nm_items.append((Context(q.query_tokens, (), NORMAL), tokens))
    he = np.concatenate(batch_step_distributions(params, he_items))
    nm = np.concatenate(batch_step_distributions(params, nm_items))
    return float(row_kl(he, nm).mean())


def inter_mode_k1(params: PolicyParameters, queries: Sequence[Query], samples_per_query: int = 8,
                  seed: int = 0, max_len: int | None = None) -> tuple[float, float]:
    """k1 estimate of the same quantity and its standard error (per-token samples)."""
    samples = _he_samples(params, queries, samples_per_query, seed, max_len)
    he_items, nm_items = [], []
    for q in queries:
        for tokens, _, _ in samples[q.id]:
            he_items.append((Context(q.query_tokens, (), HIGH_ENTROPY), tokens))
            nm_items.append((Context(q.query_tokens, (), NORMAL), tokens))
    flat_tokens = np.concatenate([np.asarray(t) for _, t in he_items])
    he = np.concatenate(batch_step_distributions(params, he_items))
    nm = np.concatenate(batch_step_distributions(params, nm_items))
    idx = np.arange(flat_tokens.size)
    d = np.log(he[idx, flat_tokens]) - np.log(nm[idx, flat_tokens])
    return float(d.mean()), float(d.std() / math.sqrt(d.size))


# --------------------------------------------------------------------------- diversity


def _ngrams(seq: Sequence, n: int) -> list[tuple]:
    return [tuple(seq[i: i + n]) for i in range(len(seq) - n + 1)]


def ngram_ratio(seq: Sequence, n: int = 2) -> float:
    grams = _ngrams(seq, n)
    return len(set(grams)) / len(grams) if grams else 0.0


def div_ngram(rollouts: Sequence[Sequence], n: int = 2) -> float:
    """Mean over rollouts of unique/total n-gram ratio; rollouts shorter than n count as 0."""
    if not rollouts:
        raise ValidationError("empty rollout set")
    return float(np.mean([ngram_ratio(r, n) for r in rollouts]))


def bleu(hypothesis: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Multi-reference BLEU with add-one smoothing where an n-gram order has no matches."""
    c = len(hypothesis)
    if c == 0 or not references:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        grams = Counter(_ngrams(hypothesis, n))
        total = sum(grams.values())
        if total == 0:
            continue  # no n-grams of this order: contributes precision 1
        max_ref = Counter()
        for ref in references:
            for g, k in Counter(_ngrams(ref, n)).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matched = sum(min(k, max_ref[g]) for g, k in grams.items())
        p = matched / total if matched else 1.0 / (total + 1)
        log_p += math.log(p) / max_n
    ref_lens = sorted(len(r) for r in references)
    r = min(ref_lens, key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def div_bleu(rollouts: Sequence[Sequence]) -> float:
    """1 - mean BLEU-4 of each rollout against the others."""
    rollouts = [tuple(r) for r in rollouts]
    if len(rollouts) < 2:
        raise ValidationError("need at least two rollouts")
    scores = [bleu(r, rollouts[:i] + rollouts[i + 1:]) for i, r in enumerate(rollouts)]
    return float(min(1.0, max(0.0, 1.0 - np.mean(scores))))


def diversity(params: PolicyParameters, queries: Sequence[Query], mode: str, runs: int = 8, seed: int = 0,
              temperature: float = EVAL_TEMPERATURE, **kw) -> tuple[float, float]:
    """(div_ngram, div_bleu) averaged over queries, each from `runs` samples."""
    samples = sample_eval(params, queries, mode, runs, seed, temperature, **kw)
    ng = [div_ngram([t for t, _, _ in g]) for g in samples.values()]
    bl = [div_bleu([t for t, _, _ in g]) for g in samples.values()]
    return float(np.mean(ng)), float(np.mean(bl))


# --------------------------------------------------------------------------- probes and reports


def prompt_generalization_probe(params: PolicyParameters, queries: Sequence[Query],
                                prefixes: Sequence[str] = PROBE_PREFIXES, trained: Sequence[str] = (HIGH_ENTROPY,),
                                runs: int = 8, seed: int = 0, temperature: float = EVAL_TEMPERATURE):
    """Evaluate under each prefix; returns {prefix: (accuracy, entropy_bits, entropy delta vs normal)}.

    Every probe other than the trained high-entropy prefix is meant to be held
    out, so it may not appear among the `trained` prefixes.
    """
    vocab = params.vocab
    trained_ids = {vocab.prefix_ids(m) for m in trained}
    for m in prefixes:
        if m != HIGH_ENTROPY and vocab.prefix_ids(m) in trained_ids:
            raise ConfigError(f"held-out probe prefix {m!r} collides with a trained prefix")
    base = evaluate_mode(params, queries, NORMAL, runs, temperature, seed)
    out = {}
    for m in prefixes:
        res = evaluate_mode(params, queries, m, runs, temperature, seed)
        out[m] = (res.accuracy, res.mean_entropy_bits, res.mean_entropy_bits - base.mean_entropy_bits)
    return out


def analyze(params: PolicyParameters, queries: Sequence[Query], checkpoint_id: str = "", runs: int = 8,
            n: int = 8, seed: int = 0, modes: Sequence[str] = (NORMAL,) + PROBE_PREFIXES,
            kl_samples: int = 8) -> list[MetricsRecord]:
    kl = inter_mode_kl(params, queries, kl_samples, seed)
    records = []
    for mode in modes:
        samples = sample_eval(params, queries, mode, max(runs, n), seed)
        head = {qid: g[:runs] for qid, g in samples.items()}
        res = _summarise(head)
        bon = float(np.mean([any(r == 1.0 for _, r, _ in g[:n]) for g in samples.values()]))
        ng = float(np.mean([div_ngram([t for t, _, _ in g]) for g in head.values()]))
        bl = float(np.mean([div_bleu([t for t, _, _ in g]) for g in head.values()])) if runs > 1 else 0.0
        records.append(MetricsRecord(checkpoint_id, mode, res.accuracy, res.mean_entropy_bits, res.mean_length,
                                     kl, bon, ng, bl))
    return records


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def write_report(path, records: Sequence[MetricsRecord]) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for rec in records:
            writer.writerow([v if isinstance(v, str) else f"{v:.10g}" for v in asdict(rec).values()])


def summary_table(records: Sequence[MetricsRecord]) -> str:
    """Plain-text table: per-mode Acc/Ent/Len/Best-of-N/diversity plus the normal-vs-HE gaps."""
    lines = [f"{'mode':<14}{'acc':>8}{'best@n':>8}{'ent(bits)':>11}{'len':>7}{'div-ng':>8}{'div-bleu':>10}"]
    for r in records:
        lines.append(f"{r.mode:<14}{r.accuracy:>8.3f}{r.best_of_n:>8.3f}{r.mean_entropy_bits:>11.3f}"
                     f"{r.mean_length:>7.2f}{r.div_ngram:>8.3f}{r.div_bleu:>10.3f}")
    by_mode = {r.mode: r for r in records}
    if NORMAL in by_mode and HIGH_ENTROPY in by_mode:
        a, b = by_mode[NORMAL], by_mode[HIGH_ENTROPY]
        lines.append("")
        lines.append(f"|dAcc| {abs(a.accuracy - b.accuracy):.3f}  |dEnt| {abs(a.mean_entropy_bits - b.mean_entropy_bits):.3f}"
                     f"  |dLen| {abs(a.mean_length - b.mean_length):.2f}  KL(he||normal) {a.forward_kl_he_from_normal:.4f}")
    return "\n".join(lines) + "\n"
