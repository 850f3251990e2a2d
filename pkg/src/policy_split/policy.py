"""Autoregressive softmax sequence policies with prefix-selected modes.

A policy is a flat parameter vector plus an architecture tag. Two
architectures are provided:

* ``TabularSoftmax``: a shared logit row per hashed (query, response) context
  plus a residual row keyed by (mode prefix, query, response). Every mode,
  normal included, reads its own residual rows, so the modes have equal
  capacity; a zero residual table makes all modes identical until training
  separates them. ``prefix_rows=0`` drops the residual table and ignores
  prefixes entirely.
* ``TinyMlp``: embeddings of a fixed slot layout (prefix, query, generated
  tokens) feeding one tanh hidden layer. Reserved-token embeddings start at
  zero, which makes the untrained network prefix-insensitive.

The output distribution ranges over the vocabulary's output tokens only, so
reserved prefix tokens and query-only symbols can never be sampled.
"""

from __future__ import annotations

import functools
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import (
    HIGH_ENTROPY,
    LN2,
    NORMAL,
    CategoricalDistribution,
    LogProbTrace,
    log_softmax,
    row_entropy,
    softmax,
)
from .errors import IncompatibleCheckpointError, NumericError, ValidationError
from .optim import AdamMoments, optimizer_update

TABULAR = "TabularSoftmax"
MLP = "TinyMlp"


class UnderTrainedWarning(UserWarning):
    """Pretraining finished above the target entropy."""


# --------------------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory. Ids are assigned in order: outputs, inputs, reserved."""

    output_tokens: tuple[str, ...]
    input_tokens: tuple[str, ...]
    reserved_tokens: tuple[str, ...]
    prefixes: tuple[tuple[str, tuple[str, ...]], ...]
    eos: str = "EOS"
    pad: str = "PAD"

    def __post_init__(self):
        names = self.output_tokens + self.input_tokens + self.reserved_tokens
        if len(set(names)) != len(names):
            raise ValidationError("token names must be unique")
        if not 8 <= len(names) <= 64:
            raise ValidationError(f"vocabulary size must be in [8, 64], got {len(names)}")
        if self.eos not in self.output_tokens:
            raise ValidationError("EOS must be an output token")
        if self.pad not in self.input_tokens:
            raise ValidationError("PAD must be an input-only token")
        seen = set()
        for name, seq in self.prefixes:
            if name == NORMAL:
                raise ValidationError("the normal mode has no prefix")
            if not 1 <= len(seq) <= 4:
                raise ValidationError(f"prefix {name!r} must have 1-4 tokens")
            if any(tok not in self.reserved_tokens for tok in seq):
                raise ValidationError(f"prefix {name!r} uses tokens outside the reserved range")
            if seq in seen:
                raise ValidationError(f"prefix {name!r} duplicates another prefix")
            seen.add(seq)

    @functools.cached_property
    def ids(self) -> dict[str, int]:
        names = self.output_tokens + self.input_tokens + self.reserved_tokens
        return {name: i for i, name in enumerate(names)}

    @functools.cached_property
    def names(self) -> tuple[str, ...]:
        return self.output_tokens + self.input_tokens + self.reserved_tokens

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def n_out(self) -> int:
        return len(self.output_tokens)

    @property
    def eos_id(self) -> int:
        return self.ids[self.eos]

    @property
    def pad_id(self) -> int:
        return self.ids[self.pad]

    @functools.cached_property
    def reserved_ids(self) -> frozenset[int]:
        return frozenset(self.ids[t] for t in self.reserved_tokens)

    @functools.cached_property
    def reserved_prefixes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(self.ids[t] for t in seq) for name, seq in self.prefixes}

    def prefix_ids(self, mode: str) -> tuple[int, ...]:
        if mode == NORMAL:
            return ()
        try:
            return self.reserved_prefixes[mode]
        except KeyError:
            raise ValidationError(f"unknown mode prefix {mode!r}") from None

    def encode(self, names: Sequence[str]) -> tuple[int, ...]:
        try:
            return tuple(self.ids[n] for n in names)
        except KeyError as exc:
            raise ValidationError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.names[i] for i in ids)

    def to_dict(self) -> dict:
        return {
            "output_tokens": list(self.output_tokens),
            "input_tokens": list(self.input_tokens),
            "reserved_tokens": list(self.reserved_tokens),
            "prefixes": [[name, list(seq)] for name, seq in self.prefixes],
            "eos": self.eos,
            "pad": self.pad,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(
            tuple(d["output_tokens"]),
            tuple(d["input_tokens"]),
            tuple(d["reserved_tokens"]),
            tuple((name, tuple(seq)) for name, seq in d["prefixes"]),
            d.get("eos", "EOS"),
            d.get("pad", "PAD"),
        )


HE_REWRITTEN = "he_rewritten"
LOW_ENTROPY = "le"


def default_vocabulary() -> Vocabulary:
    """Digits, ANS and EOS as outputs; arithmetic symbols as query-only tokens.

    The rewritten high-entropy prefix shares its second token (and slot) with
    the trained one; the low-entropy prefix shares nothing with it.
    """
    return Vocabulary(
        output_tokens=tuple(str(d) for d in range(10)) + ("ANS", "EOS"),
        input_tokens=("+", "*", "=", "PAD"),
        reserved_tokens=("<r0>", "<r1>", "<r2>", "<r3>"),
        prefixes=(
            (HIGH_ENTROPY, ("<r0>", "<r1>")),
            (HE_REWRITTEN, ("<r2>", "<r1>")),
            (LOW_ENTROPY, ("<r3>", "<r2>")),
        ),
    )


# --------------------------------------------------------------------------- context


@dataclass(frozen=True)
class Context:
    """Conditioning for one decoding step: mode prefix, query, response so far."""

    query_tokens: tuple[int, ...]
    generated: tuple[int, ...] = ()
    mode: str = NORMAL

    def extend(self, tokens: Sequence[int]) -> "Context":
        return Context(self.query_tokens, self.generated + tuple(tokens), self.mode)

    def with_mode(self, mode: str) -> "Context":
        return Context(self.query_tokens, self.generated, mode)


# --------------------------------------------------------------------------- architectures

_MASK64 = (1 << 64) - 1


def _mix(h: int, tok: int) -> int:
    h = ((h ^ (tok + 0x9E3779B97F4A7C15)) * 0xBF58476D1CE4E5B9) & _MASK64
    return h ^ (h >> 29)


def _finish(h: int) -> int:
    h = ((h ^ (h >> 31)) * 0x94D049BB133111EB) & _MASK64
    return h ^ (h >> 32)


_SEP = 1 << 20
_BASE_SEED = 0x243F6A8885A308D3
_RESID_SEED = 0x13198A2E03707344


class TabularSoftmax:
    """Hashed logit table with an optional per-mode residual table.

    dims = (context_window, n_rows, prefix_rows).
    """

    tag = TABULAR

    def __init__(self, vocab: Vocabulary, dims: Sequence[int]):
        if len(dims) != 3:
            raise ValidationError("TabularSoftmax dims are (context_window, n_rows, prefix_rows)")
        self.vocab = vocab
        self.window, self.n_rows, self.prefix_rows = (int(d) for d in dims)
        if self.window < 1 or self.n_rows < 1 or self.prefix_rows < 0:
            raise ValidationError(f"invalid TabularSoftmax dims {tuple(dims)}")
        self.dims = (self.window, self.n_rows, self.prefix_rows)
        self.n_out = vocab.n_out
        self.n_params = (self.n_rows + self.prefix_rows) * self.n_out

    def initial_values(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params)

    def mode_param_mask(self) -> np.ndarray:
        """Parameters that only mode-specific contexts read (the residual table)."""
        mask = np.zeros(self.n_params, dtype=bool)
        mask[self.n_rows * self.n_out:] = True
        return mask

    # state: (base_hash, resid_hash or None, context length)
    def context_state(self, ctx: Context):
        prefix = self.vocab.prefix_ids(ctx.mode)
        length = len(prefix) + len(ctx.query_tokens) + len(ctx.generated)
        if length > self.window:
            raise ValidationError(f"context length {length} exceeds window {self.window}")
        hb = _BASE_SEED
        for t in ctx.query_tokens:
            hb = _mix(hb, t)
        hb = _mix(hb, _SEP)
        hr = None
        if self.prefix_rows:
            hr = _RESID_SEED
            for t in prefix:
                hr = _mix(hr, t)
            hr = _mix(hr, _SEP)
            for t in ctx.query_tokens:
                hr = _mix(hr, t)
            hr = _mix(hr, _SEP)
        for t in ctx.generated:
            hb = _mix(hb, t)
            if hr is not None:
                hr = _mix(hr, t)
        return (hb, hr, length)

    def advance(self, state, token: int):
        hb, hr, length = state
        if length + 1 > self.window:
            raise ValidationError(f"context length {length + 1} exceeds window {self.window}")
        return (_mix(hb, token), None if hr is None else _mix(hr, token), length + 1)

    def _rows(self, states):
        base = np.fromiter((_finish(s[0]) % self.n_rows for s in states), dtype=np.int64, count=len(states))
        resid_mask = np.fromiter((s[1] is not None for s in states), dtype=bool, count=len(states))
        resid = np.fromiter(
            ((_finish(s[1]) % self.prefix_rows) if s[1] is not None else 0 for s in states),
            dtype=np.int64, count=len(states))
        return base, resid, resid_mask

    def logits(self, values: np.ndarray, states) -> np.ndarray:
        base, resid, mask = self._rows(states)
        table = values[: self.n_rows * self.n_out].reshape(self.n_rows, self.n_out)
        out = table[base]
        if mask.any():
            rtable = values[self.n_rows * self.n_out:].reshape(self.prefix_rows, self.n_out)
            out[mask] += rtable[resid[mask]]
        return out

    def backprop(self, values: np.ndarray, states, dlogits: np.ndarray) -> np.ndarray:
        base, resid, mask = self._rows(states)
        grad = np.zeros(self.n_params)
        gtable = grad[: self.n_rows * self.n_out].reshape(self.n_rows, self.n_out)
        np.add.at(gtable, base, dlogits)
        if mask.any():
            rtable = grad[self.n_rows * self.n_out:].reshape(self.prefix_rows, self.n_out)
            np.add.at(rtable, resid[mask], dlogits[mask])
        return grad


class TinyMlp:
    """Slot embeddings -> tanh hidden layer -> output logits.

    dims = (prefix_slots, query_slots, gen_slots, embed_dim, hidden).
    Empty slots and PAD contribute a constant zero vector.
    """

    tag = MLP

    def __init__(self, vocab: Vocabulary, dims: Sequence[int]):
        if len(dims) != 5:
            raise ValidationError("TinyMlp dims are (prefix_slots, query_slots, gen_slots, embed_dim, hidden)")
        self.vocab = vocab
        self.prefix_slots, self.query_slots, self.gen_slots, self.d, self.h = (int(x) for x in dims)
        if min(self.prefix_slots, self.query_slots, self.gen_slots, self.d, self.h) < 1:
            raise ValidationError(f"invalid TinyMlp dims {tuple(dims)}")
        self.dims = (self.prefix_slots, self.query_slots, self.gen_slots, self.d, self.h)
        self.n_out = vocab.n_out
        self.V = vocab.size
        self.S = self.prefix_slots + self.query_slots + self.gen_slots
        self.window = self.S
        sizes = [
            ("E", self.V * self.d),
            ("W1", self.h * self.S * self.d),
            ("b1", self.h),
            ("W2", self.n_out * self.h),
            ("b2", self.n_out),
        ]
        self._slices = {}
        offset = 0
        for name, n in sizes:
            self._slices[name] = slice(offset, offset + n)
            offset += n
        self.n_params = offset

    def unpack(self, values: np.ndarray):
        s = self._slices
        return (
            values[s["E"]].reshape(self.V, self.d),
            values[s["W1"]].reshape(self.h, self.S * self.d),
            values[s["b1"]],
            values[s["W2"]].reshape(self.n_out, self.h),
            values[s["b2"]],
        )

    def initial_values(self, rng: np.random.Generator) -> np.ndarray:
        values = np.zeros(self.n_params)
        E, W1, b1, W2, b2 = self.unpack(values)
        E[:] = rng.normal(0.0, 1.0, E.shape)
        E[self.vocab.pad_id] = 0.0
        for r in self.vocab.reserved_ids:
            E[r] = 0.0
        W1[:] = rng.normal(0.0, 1.0 / math.sqrt(self.S * self.d), W1.shape)
        W2[:] = rng.normal(0.0, 0.1 / math.sqrt(self.h), W2.shape)
        return values

    def mode_param_mask(self) -> np.ndarray:
        """Embeddings of the reserved prefix tokens."""
        mask = np.zeros(self.n_params, dtype=bool)
        rows = mask[self._slices["E"]].reshape(self.V, self.d)
        rows[list(self.vocab.reserved_ids)] = True
        return mask

    # state: tuple of S slot ids, -1 for empty
    def context_state(self, ctx: Context):
        prefix = self.vocab.prefix_ids(ctx.mode)
        if len(prefix) > self.prefix_slots:
            raise ValidationError(f"prefix of length {len(prefix)} exceeds {self.prefix_slots} slots")
        if len(ctx.query_tokens) > self.query_slots:
            raise ValidationError(f"query of length {len(ctx.query_tokens)} exceeds {self.query_slots} slots")
        if len(ctx.generated) > self.gen_slots:
            raise ValidationError(f"context length exceeds window: {len(ctx.generated)} generated tokens "
                                  f"for {self.gen_slots} slots")
        slots = [-1] * self.S
        slots[: len(prefix)] = prefix
        q0 = self.prefix_slots
        slots[q0: q0 + len(ctx.query_tokens)] = ctx.query_tokens
        g0 = q0 + self.query_slots
        slots[g0: g0 + len(ctx.generated)] = ctx.generated
        return (tuple(slots), len(ctx.generated))

    def advance(self, state, token: int):
        slots, n = state
        if n + 1 > self.gen_slots:
            raise ValidationError(f"context length exceeds window: {n + 1} generated tokens "
                                  f"for {self.gen_slots} slots")
        pos = self.prefix_slots + self.query_slots + n
        return (slots[:pos] + (token,) + slots[pos + 1:], n + 1)

    def _slot_array(self, states) -> np.ndarray:
        arr = np.array([s[0] for s in states], dtype=np.int64).reshape(len(states), self.S)
        arr[arr == self.vocab.pad_id] = -1
        arr[arr < 0] = self.V  # index of the constant zero row
        return arr

    def _forward(self, values, states):
        E, W1, b1, W2, b2 = self.unpack(values)
        E_ext = np.vstack([E, np.zeros((1, self.d))])
        slots = self._slot_array(states)
        X = E_ext[slots].reshape(len(states), self.S * self.d)
        H = np.tanh(X @ W1.T + b1)
        Z = H @ W2.T + b2
        return slots, X, H, Z

    def logits(self, values: np.ndarray, states) -> np.ndarray:
        return self._forward(values, states)[3]

    def backprop(self, values: np.ndarray, states, dlogits: np.ndarray) -> np.ndarray:
        E, W1, b1, W2, b2 = self.unpack(values)
        slots, X, H, _ = self._forward(values, states)
        grad = np.zeros(self.n_params)
        gE, gW1, gb1, gW2, gb2 = self.unpack(grad)
        gW2 += dlogits.T @ H
        gb2 += dlogits.sum(axis=0)
        dA = (dlogits @ W2) * (1.0 - H * H)
        gW1 += dA.T @ X
        gb1 += dA.sum(axis=0)
        dX = (dA @ W1).reshape(len(states), self.S, self.d)
        gE_ext = np.zeros((self.V + 1, self.d))
        np.add.at(gE_ext, slots, dX)
        gE += gE_ext[: self.V]
        return grad


_ARCHITECTURES = {TABULAR: TabularSoftmax, MLP: TinyMlp}


@functools.lru_cache(maxsize=64)
def build_architecture(tag: str, dims: tuple[int, ...], vocab: Vocabulary):
    try:
        cls = _ARCHITECTURES[tag]
    except KeyError:
        raise ValidationError(f"unknown architecture {tag!r}") from None
    return cls(vocab, dims)


def default_dims(tag: str) -> tuple[int, ...]:
    if tag == TABULAR:
        return (32, 1 << 14, 1 << 14)
    if tag == MLP:
        return (4, 12, 12, 8, 48)
    raise ValidationError(f"unknown architecture {tag!r}")


# --------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class PolicyParameters:
    values: np.ndarray
    architecture_tag: str
    architecture_dims: tuple[int, ...]
    vocab: Vocabulary = field(default_factory=default_vocabulary)
    version: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "architecture_dims", tuple(int(d) for d in self.architecture_dims))
        arch = self.arch
        if values.shape != (arch.n_params,):
            raise ValidationError(f"{self.architecture_tag} expects {arch.n_params} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("parameters must be finite")
        object.__setattr__(self, "values", values)

    @property
    def arch(self):
        return build_architecture(self.architecture_tag, self.architecture_dims, self.vocab)

    def with_values(self, values: np.ndarray) -> "PolicyParameters":
        return PolicyParameters(np.array(values, dtype=np.float64), self.architecture_tag,
                                self.architecture_dims, self.vocab, self.version + 1)


def init_policy(vocab: Vocabulary | None = None, architecture: str = TABULAR,
                dims: Sequence[int] | None = None, seed: int = 0) -> PolicyParameters:
    vocab = vocab or default_vocabulary()
    dims = tuple(dims) if dims is not None else default_dims(architecture)
    arch = build_architecture(architecture, dims, vocab)
    values = arch.initial_values(np.random.default_rng([seed, 0x1417]))
    return PolicyParameters(values, architecture, dims, vocab, 0)


# --------------------------------------------------------------------------- evaluation


def _check_tokens(vocab: Vocabulary, tokens: Sequence[int]):
    for pos, tok in enumerate(tokens):
        if not 0 <= tok < vocab.n_out:
            raise ValidationError(f"token {tok!r} at position {pos} is not an output token")


def _position_states(arch, items):
    """States for every (context, tokens) position, with tokens flattened."""
    states, flat = [], []
    for ctx, tokens in items:
        s = arch.context_state(ctx)
        for i, tok in enumerate(tokens):
            states.append(s)
            flat.append(tok)
            if i + 1 < len(tokens):
                s = arch.advance(s, tok)
    return states, np.asarray(flat, dtype=np.int64)


def next_token_distribution(params: PolicyParameters, ctx: Context) -> CategoricalDistribution:
    arch = params.arch
    z = arch.logits(params.values, [arch.context_state(ctx)])
    return CategoricalDistribution(softmax(z)[0])


def step_distributions(params: PolicyParameters, ctx: Context, tokens: Sequence[int]) -> np.ndarray:
    """Probability rows, one per position of `tokens` (row t conditions on tokens[:t])."""
    return batch_step_distributions(params, [(ctx, tokens)])[0]


def batch_step_distributions(params: PolicyParameters, items) -> list[np.ndarray]:
    arch = params.arch
    for _, tokens in items:
        _check_tokens(params.vocab, tokens)
    states, _ = _position_states(arch, items)
    probs = softmax(arch.logits(params.values, states)) if states else np.zeros((0, arch.n_out))
    out, i = [], 0
    for _, tokens in items:
        out.append(probs[i: i + len(tokens)])
        i += len(tokens)
    return out


def score_batch(params: PolicyParameters, items) -> list[LogProbTrace]:
    """Log-probabilities of each token sequence under its own context."""
    arch = params.arch
    for _, tokens in items:
        _check_tokens(params.vocab, tokens)
    states, flat = _position_states(arch, items)
    if states:
        logp = log_softmax(arch.logits(params.values, states))
        picked = logp[np.arange(flat.size), flat]
    else:
        picked = np.zeros(0)
    out, i = [], 0
    for ctx, tokens in items:
        out.append(LogProbTrace(picked[i: i + len(tokens)], ctx.mode))
        i += len(tokens)
    return out


def score_sequence(params: PolicyParameters, ctx: Context, tokens: Sequence[int]) -> LogProbTrace:
    return score_batch(params, [(ctx, tuple(tokens))])[0]


@dataclass(frozen=True)
class SampledResponse:
    """Tokens drawn from the policy with their untempered log-probs and entropies (nats)."""

    tokens: tuple[int, ...]
    trace: LogProbTrace
    entropies: np.ndarray

    def __len__(self):
        return len(self.tokens)


def _filter_probs(probs: np.ndarray, top_k: int | None, top_p: float | None) -> np.ndarray:
    if top_k is not None and 0 < top_k < probs.shape[1]:
        kth = np.sort(probs, axis=1)[:, -top_k][:, None]
        probs = np.where(probs >= kth, probs, 0.0)
    if top_p is not None and top_p < 1.0:
        order = np.argsort(-probs, axis=1, kind="stable")
        sorted_p = np.take_along_axis(probs, order, axis=1)
        cum = np.cumsum(sorted_p, axis=1) / sorted_p.sum(axis=1, keepdims=True)
        keep_sorted = (cum - sorted_p / sorted_p.sum(axis=1, keepdims=True)) < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=1)
        probs = np.where(keep, probs, 0.0)
    return probs / probs.sum(axis=1, keepdims=True)


def sample_batch(params: PolicyParameters, contexts: Sequence[Context], rngs: Sequence[np.random.Generator],
                 max_len: int, temperature: float = 1.0, top_k: int | None = None,
                 top_p: float | None = None) -> list[SampledResponse]:
    """Sample one response per context, in lockstep.

    Each response consumes uniforms only from its own generator, so results
    do not depend on which other contexts share the batch.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    arch = params.arch
    eos = params.vocab.eos_id
    n = len(contexts)
    states = [arch.context_state(c) for c in contexts]
    tokens = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    ents = [[] for _ in range(n)]
    active = list(range(n))
    for step in range(max_len):
        if not active:
            break
        z = arch.logits(params.values, [states[i] for i in active])
        lp = log_softmax(z)
        h = row_entropy(np.exp(lp))
        probs = _filter_probs(softmax(z / temperature), top_k, top_p)
        cum = np.cumsum(probs, axis=1)
        u = np.array([rngs[i].random() for i in active]) * cum[:, -1]
        choice = (cum <= u[:, None]).sum(axis=1)
        still = []
        for j, i in enumerate(active):
            tok = int(min(choice[j], arch.n_out - 1))
            tokens[i].append(tok)
            logps[i].append(lp[j, tok])
            ents[i].append(h[j])
            if tok != eos and step + 1 < max_len:
                states[i] = arch.advance(states[i], tok)
                still.append(i)
        active = still
    return [
        SampledResponse(tuple(tokens[i]), LogProbTrace(np.array(logps[i]), contexts[i].mode), np.array(ents[i]))
        for i in range(n)
    ]


def sample_rollout(params: PolicyParameters, ctx: Context, max_len: int, temperature: float,
                   rng: np.random.Generator, top_k: int | None = None, top_p: float | None = None) -> SampledResponse:
    return sample_batch(params, [ctx], [rng], max_len, temperature, top_k, top_p)[0]


# --------------------------------------------------------------------------- gradients


def _flatten_weighted(params, batch):
    items, weights = [], []
    for ctx, tokens, w in batch:
        tokens = tuple(tokens)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(tokens),):
            raise ValidationError(f"weights shape {w.shape} does not match {len(tokens)} tokens")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        _check_tokens(params.vocab, tokens)
        items.append((ctx, tokens))
        weights.append(w)
    states, flat = _position_states(params.arch, items)
    w = np.concatenate(weights) if weights else np.zeros(0)
    return states, flat, w


def weighted_logprob_gradient(params: PolicyParameters, batch) -> np.ndarray:
    """Gradient of sum_t w_t log pi(o_t | ctx, o_<t) over a batch of (ctx, tokens, weights)."""
    states, flat, w = _flatten_weighted(params, batch)
    arch = params.arch
    if not states or not np.any(w):
        return np.zeros(arch.n_params)
    keep = np.flatnonzero(w)
    states = [states[i] for i in keep]
    flat, w = flat[keep], w[keep]
    p = softmax(arch.logits(params.values, states))
    dlogits = -p * w[:, None]
    dlogits[np.arange(flat.size), flat] += w
    return arch.backprop(params.values, states, dlogits)


def weighted_entropy_and_gradient(params: PolicyParameters, batch) -> tuple[float, np.ndarray]:
    """Value and gradient of sum_t w_t H(pi(. | ctx, o_<t)), entropies in nats."""
    states, _, w = _flatten_weighted(params, batch)
    arch = params.arch
    if not states or not np.any(w):
        return 0.0, np.zeros(arch.n_params)
    keep = np.flatnonzero(w)
    states = [states[i] for i in keep]
    w = w[keep]
    p = softmax(arch.logits(params.values, states))
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    h = -(p * logp).sum(axis=1)
    # dH/dz_k = -p_k (log p_k + H)
    dlogits = -p * (logp + h[:, None]) * w[:, None]
    return float(np.dot(w, h)), arch.backprop(params.values, states, dlogits)


# --------------------------------------------------------------------------- pretraining


def mean_entropy_bits(params: PolicyParameters, dataset) -> float:
    dists = batch_step_distributions(params, [(c, tuple(t)) for c, t in dataset])
    rows = np.concatenate(dists) if dists else np.zeros((0, params.arch.n_out))
    return float(row_entropy(rows).mean() / LN2) if rows.size else 0.0


def supervised_pretrain(params: PolicyParameters, dataset, steps: int, lr: float,
                        held_out=None, target_entropy_bits: float = 0.5) -> PolicyParameters:
    """Maximise the mean sequence log-likelihood of `dataset` with full-batch Adam."""
    if not dataset:
        raise ValidationError("pretraining dataset is empty")
    if steps <= 0:
        return params
    n = len(dataset)
    batch = [(ctx, tuple(tokens), np.full(len(tokens), 1.0 / n)) for ctx, tokens in dataset]
    moments = AdamMoments.zeros(params.arch.n_params)
    # mode-specific parameters stay at their initial values, so every mode starts identical
    frozen = params.arch.mode_param_mask()
    values = params.values
    current = params
    for step in range(steps):
        grad = weighted_logprob_gradient(current, batch)
        grad[frozen] = 0.0
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite pretraining gradient at step {step}", {"step": step})
        moments, values = optimizer_update(moments, values, -grad, lr, weight_decay=0.0, clip_norm=None)
        if not np.all(np.isfinite(values)):
            raise NumericError(f"pretraining diverged at step {step}", {"step": step})
        current = PolicyParameters(values, params.architecture_tag, params.architecture_dims,
                                   params.vocab, params.version)
    result = current.with_values(values)
    probe = held_out if held_out is not None else dataset
    ent = mean_entropy_bits(result, probe)
    if ent >= target_entropy_bits:
        warnings.warn(f"pretrained policy is under-trained: mean entropy {ent:.3f} bits "
                      f">= {target_entropy_bits}", UnderTrainedWarning, stacklevel=2)
    return result


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"PSPLIT-CKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, params: PolicyParameters, config_hash: str = "",
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Header (magic, format version, JSON header) then little-endian float64 sections."""
    sections = [("params", params.values)] + list((extra or {}).items())
    header = {
        "architecture": params.architecture_tag,
        "dims": list(params.architecture_dims),
        "vocab": params.vocab.to_dict(),
        "config_hash": config_hash,
        "version": params.version,
        "sections": [[name, int(np.asarray(arr).size)] for name, arr in sections],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in sections:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParameters, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off: off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name, n in header["sections"]:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise IncompatibleCheckpointError(f"{path}: trailing or missing bytes")
    params = PolicyParameters(arrays.pop("params"), header["architecture"], tuple(header["dims"]),
                              Vocabulary.from_dict(header["vocab"]), header["version"])
    return params, arrays, header
