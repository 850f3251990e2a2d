"""PPO-clipped dual-mode objectives, baseline objectives and the training loop.

Objectives are maximised. The only negation happens when the gradient is
handed to the optimizer, which minimises.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .advantages import (
    CORRECTNESS_ONLY,
    ENTROPY_REGULARIZED,
    STD_EPSILON,
    b_values,
    clip_cov_mask,
    entropy_advantage_bonus,
    entropy_driven_scale,
    forking_token_mask,
    grpo_advantages,
    he_advantages,
    standardize_b,
)
from .core_math import HIGH_ENTROPY, LN2, NORMAL, symmetric_clip
from .environment import Query
from .errors import ConfigError, NumericError
from .optim import AdamMoments, optimizer_update
from .policy import Context, PolicyParameters, score_batch, weighted_entropy_and_gradient, weighted_logprob_gradient
from .rollouts import Assignment, RolloutGroup, build_training_assignments, sample_groups

GRPO = "GRPO"
ENTROPY_REGULARIZATION = "EntropyRegularization"
ENTROPY_ADVANTAGE = "EntropyAdvantage"
FORKING_TOKEN_ONLY = "ForkingTokenOnly"
CLIP_COV = "ClipCov"
ENTROPY_DRIVEN_ADVANTAGE = "EntropyDrivenAdvantage"
POLICY_SPLIT = "PolicySplit"

METHODS = (GRPO, ENTROPY_REGULARIZATION, ENTROPY_ADVANTAGE, FORKING_TOKEN_ONLY, CLIP_COV,
           ENTROPY_DRIVEN_ADVANTAGE, POLICY_SPLIT)

METRIC_COLUMNS = ("step", "method", "mode", "mean_reward", "mean_entropy_bits", "mean_length",
                  "inter_mode_k1_kl", "loss", "grad_norm")


@dataclass
class TrainConfig:
    method: str = POLICY_SPLIT
    eta: float = 0.03
    eta_prime: float = 0.0
    alpha: float = 0.5
    kappa: float = 2.0
    epsilon_ppo: float = 0.2
    ent_reg_coef: float = 0.003
    ent_adv_coef: float = 0.4
    forking_keep: float = 0.2
    clip_cov_ratio: float = 2e-4
    clip_cov_lower: float = 1.0
    clip_cov_upper: float = 5.0
    edge_floor: float = 0.1
    group_size: int = 8
    batch_queries: int = 32
    lr: float = 0.01
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_len: int = 8
    temperature_train: float = 1.0
    seed: int = 0
    sharing: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.kappa < 1:
            raise ConfigError(f"kappa must be >= 1, got {self.kappa}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epsilon_ppo <= 0:
            raise ConfigError("epsilon_ppo must be > 0")
        if self.group_size < 2 or self.group_size % 2:
            raise ConfigError(f"group_size must be even and >= 2, got {self.group_size}")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.batch_queries < 1 or self.max_len < 1 or self.temperature_train <= 0:
            raise ConfigError("batch_queries, max_len and temperature_train must be positive")

    @property
    def dual(self) -> bool:
        return self.method == POLICY_SPLIT

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class TrainingState:
    params: PolicyParameters
    step: int = 0
    moments: AdamMoments | None = None
    history: list[dict] = field(default_factory=list)
    discoveries: dict[str, set] = field(default_factory=lambda: {NORMAL: set(), HIGH_ENTROPY: set()})

    def __post_init__(self):
        if self.moments is None:
            self.moments = AdamMoments.zeros(self.params.arch.n_params)
        if self.moments.m.shape != self.params.values.shape:
            raise ConfigError("optimizer moments do not match the parameter vector")


# --------------------------------------------------------------------------- losses


def ppo_clipped_loss(current_logprobs, old_logprobs, advantages, epsilon: float):
    """Token-summed min(rho A, clip(rho, 1 +- eps) A).

    Returns (loss, weights, ratios); weights[t] is d loss / d log pi(o_t), i.e.
    rho_t A_t where the unclipped branch is active and 0 where clipping bites.
    """
    cur = np.asarray(current_logprobs, dtype=np.float64)
    old = np.asarray(old_logprobs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(cur - old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        t = int(bad[0])
        raise NumericError(f"non-finite importance ratio at token {t}", {"token": t, "value": float(ratio[t])})
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv
    clip_active = clipped < unclipped
    surrogate = np.where(clip_active, clipped, unclipped)
    weights = np.where(clip_active, 0.0, unclipped)
    return float(surrogate.sum()), weights, ratio


# --------------------------------------------------------------------------- objectives


@dataclass
class ObjectiveResult:
    value: float
    gradient: np.ndarray
    n_assignments: int
    ratios: np.ndarray
    routing: list[tuple[str, str]]
    advantages: list[list[tuple[Assignment, np.ndarray]]]


def _group_advantages(group: RolloutGroup, config: TrainConfig):
    """Per-assignment token advantages (before batch-level masks) for one group."""
    A = grpo_advantages(group.rewards, STD_EPSILON)
    assignments = build_training_assignments(group, config.sharing)
    out = []
    method = config.method
    signal = None
    if method == POLICY_SPLIT:
        b = [b_values(r.trace(HIGH_ENTROPY), r.trace(NORMAL), config.alpha) for r in group.rollouts]
        signal = standardize_b(b, STD_EPSILON)
    if method == ENTROPY_DRIVEN_ADVANTAGE:
        seq_ent = np.array([float(np.mean(r.entropies)) for r in group.rollouts])
        A = entropy_driven_scale(A, seq_ent, config.edge_floor)
    for a in assignments:
        r = group.rollouts[a.rollout_index]
        A_tok = np.full(len(r), A[a.rollout_index])
        if method == POLICY_SPLIT:
            B_tok = signal.B[a.rollout_index]
            if a.loss_mode == HIGH_ENTROPY:
                adv, prov = he_advantages(A_tok, B_tok, config.eta, config.kappa), ENTROPY_REGULARIZED
            elif config.eta_prime != 0.0:
                adv = A_tok + config.eta_prime * symmetric_clip(B_tok, np.abs(A_tok) / config.kappa)
                prov = f"{ENTROPY_REGULARIZED}(eta_prime)"
            else:
                adv, prov = A_tok, CORRECTNESS_ONLY
        elif method == ENTROPY_ADVANTAGE:
            adv = entropy_advantage_bonus(A_tok, r.entropies, config.ent_adv_coef, config.kappa)
            prov = f"Baseline({method})"
        elif method == GRPO:
            adv, prov = A_tok, CORRECTNESS_ONLY
        else:
            adv, prov = A_tok, f"Baseline({method})"
        out.append((a, adv, prov))
    return out


def _objective(params: PolicyParameters, groups: Sequence[RolloutGroup], config: TrainConfig,
               rng: np.random.Generator | None = None) -> ObjectiveResult:
    per_group = [_group_advantages(g, config) for g in groups]
    n_groups = len(groups)
    items, flat_refs = [], []
    for gi, (g, assigns) in enumerate(zip(groups, per_group)):
        for a, _, _ in assigns:
            r = g.rollouts[a.rollout_index]
            items.append((Context(g.query.query_tokens, (), a.loss_mode), r.tokens))
            flat_refs.append((gi, a))
    current = score_batch(params, items)

    advs = [adv for assigns in per_group for _, adv, _ in assigns]
    if config.method == FORKING_TOKEN_ONLY:
        ents = np.concatenate([groups[gi].rollouts[a.rollout_index].entropies for gi, a in flat_refs])
        mask = forking_token_mask(ents, config.forking_keep)
        advs = _apply_flat_mask(advs, mask)
    elif config.method == CLIP_COV:
        flat_adv = np.concatenate(advs)
        flat_lp = np.concatenate([c.values for c in current])
        mask = clip_cov_mask(flat_adv, flat_lp, config.clip_cov_ratio, config.clip_cov_lower,
                             config.clip_cov_upper, rng)
        advs = _apply_flat_mask(advs, mask)

    total = 0.0
    batch, ratios, routing = [], [], []
    k = 0
    structured = []
    for gi, (g, assigns) in enumerate(zip(groups, per_group)):
        scale = 1.0 / (len(g) * n_groups)
        rows = []
        for a, _, prov in assigns:
            r = g.rollouts[a.rollout_index]
            adv = advs[k]
            try:
                loss, w, rho = ppo_clipped_loss(current[k].values, r.trace(a.loss_mode).values, adv,
                                                config.epsilon_ppo)
            except NumericError as exc:
                exc.diagnostics.update(query_id=g.query.id, rollout_index=a.rollout_index, loss_mode=a.loss_mode)
                raise
            total += scale * loss
            batch.append((items[k][0], r.tokens, w * scale))
            ratios.append(rho)
            routing.append((a.loss_mode, prov))
            rows.append((a, adv))
            k += 1
        structured.append(rows)
    grad = weighted_logprob_gradient(params, batch)

    if config.method == ENTROPY_REGULARIZATION and config.ent_reg_coef != 0.0:
        ent_batch = [(ctx, toks, np.full(len(toks), config.ent_reg_coef * w_scale))
                     for (ctx, toks, _), w_scale in zip(batch, _assignment_scales(groups, per_group))]
        ent_value, ent_grad = weighted_entropy_and_gradient(params, ent_batch)
        total += ent_value
        grad = grad + ent_grad

    return ObjectiveResult(total, grad, len(items), np.concatenate(ratios) if ratios else np.zeros(0),
                           routing, structured)


def _assignment_scales(groups, per_group):
    n = len(groups)
    return [1.0 / (len(g) * n) for g, assigns in zip(groups, per_group) for _ in assigns]


def _apply_flat_mask(advs, mask):
    out, i = [], 0
    for adv in advs:
        out.append(adv * mask[i: i + adv.size])
        i += adv.size
    return out


def policy_split_objective(params: PolicyParameters, groups: Sequence[RolloutGroup],
                           config: TrainConfig) -> ObjectiveResult:
    """Mean over queries of (1/G) * sum of per-assignment clipped losses.

    Normal-loss assignments use group-normalised correctness advantages;
    high-entropy-loss assignments use the clamped entropy-regularised ones.
    With sharing every rollout contributes to both.
    """
    if config.method != POLICY_SPLIT:
        raise ConfigError(f"policy_split_objective called with method {config.method!r}")
    return _objective(params, groups, config)


def baseline_objective(params: PolicyParameters, groups: Sequence[RolloutGroup], config: TrainConfig,
                       rng: np.random.Generator | None = None) -> ObjectiveResult:
    if config.method == POLICY_SPLIT or config.method not in METHODS:
        raise ConfigError(f"baseline_objective does not handle method {config.method!r}")
    return _objective(params, groups, config, rng)


def objective(params, groups, config, rng=None) -> ObjectiveResult:
    if config.method == POLICY_SPLIT:
        return policy_split_objective(params, groups, config)
    return baseline_objective(params, groups, config, rng)


# --------------------------------------------------------------------------- training loop


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0x5EED]).generate_state(1)[0])


def select_batch(queries: Sequence[Query], config: TrainConfig, step: int) -> list[Query]:
    if config.batch_queries >= len(queries):
        return list(queries)
    rng = np.random.default_rng([config.seed, step, 0xBA7C])
    idx = np.sort(rng.permutation(len(queries))[: config.batch_queries])
    return [queries[i] for i in idx]


@dataclass
class StepReport:
    step: int
    groups: list[RolloutGroup]
    objective: float
    grad_norm: float
    n_assignments: int
    scoring_calls: int
    max_ratio_deviation: float
    rows: list[dict]


def _audit(groups, result: ObjectiveResult, config: TrainConfig):
    G = config.group_size
    n_q = len(groups)
    if config.dual:
        expected_calls = 2 * G
        expected_assign = 2 * G if config.sharing else G
    else:
        expected_calls, expected_assign = G, G
    for g in groups:
        if g.scoring_calls != expected_calls:
            raise AssertionError(f"query {g.query.id}: {g.scoring_calls} scoring calls, expected {expected_calls}")
        if config.dual and any(r.old_logprobs_normal is None or r.old_logprobs_he is None for r in g.rollouts):
            raise AssertionError(f"query {g.query.id}: rollout missing a trace")
    if result.n_assignments != expected_assign * n_q:
        raise AssertionError(f"{result.n_assignments} assignments, expected {expected_assign * n_q}")
    if config.method == POLICY_SPLIT and config.eta_prime == 0.0:
        for loss_mode, prov in result.routing:
            want = CORRECTNESS_ONLY if loss_mode == NORMAL else ENTROPY_REGULARIZED
            if prov != want:
                raise AssertionError(f"{loss_mode} loss routed to {prov} advantages")


def _mode_rows(step, config, groups, objective_value, grad_norm):
    rows = []
    he_k1 = ""
    if config.dual:
        diffs = [r.old_logprobs_he.values - r.old_logprobs_normal.values
                 for g in groups for r in g.rollouts if r.sampled_mode == HIGH_ENTROPY]
        he_k1 = float(np.mean(np.concatenate(diffs)))
    for mode in ((NORMAL, HIGH_ENTROPY) if config.dual else (NORMAL,)):
        rs = [r for g in groups for r in g.rollouts if r.sampled_mode == mode]
        ents = np.concatenate([r.entropies for r in rs])
        rows.append({
            "step": step,
            "method": config.method,
            "mode": mode,
            "mean_reward": float(np.mean([r.reward for r in rs])),
            "mean_entropy_bits": float(ents.mean() / LN2),
            "mean_length": float(np.mean([len(r) for r in rs])),
            "inter_mode_k1_kl": he_k1,
            "loss": objective_value,
            "grad_norm": grad_norm,
        })
    return rows


def train_step(state: TrainingState, queries: Sequence[Query], config: TrainConfig) -> tuple[TrainingState, StepReport]:
    """Snapshot, sample groups, assign, compute advantages, one AdamW update."""
    params = state.params
    seed = step_seed(config.seed, state.step)
    groups = sample_groups(params, queries, config.group_size, config.max_len, config.temperature_train,
                           [seed] * len(queries), dual=config.dual)
    result = objective(params, groups, config, rng=np.random.default_rng([seed, 0xC0F]))
    _audit(groups, result, config)
    max_dev = float(np.max(np.abs(result.ratios - 1.0))) if result.ratios.size else 0.0
    grad_norm = float(np.linalg.norm(result.gradient))
    if not np.isfinite(result.value) or not np.isfinite(grad_norm):
        raise NumericError(f"non-finite objective at step {state.step}",
                           {"step": state.step, "objective": result.value, "grad_norm": grad_norm})
    moments, values = optimizer_update(
        state.moments, params.values, -result.gradient, config.lr,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        weight_decay=config.weight_decay, clip_norm=config.grad_clip)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NumericError(f"non-finite parameter {bad} after step {state.step}", {"step": state.step, "index": bad})
    for g in groups:
        for r in g.rollouts:
            if r.reward == 1.0:
                state.discoveries.setdefault(r.sampled_mode, set()).add((r.query_id, r.tokens))
    rows = _mode_rows(state.step, config, groups, result.value, grad_norm)
    new_state = TrainingState(params.with_values(values), state.step + 1, moments,
                              state.history + rows, state.discoveries)
    report = StepReport(state.step, groups, result.value, grad_norm, result.n_assignments,
                        sum(g.scoring_calls for g in groups), max_dev, rows)
    return new_state, report


def train(state: TrainingState, queries: Sequence[Query], config: TrainConfig, steps: int,
          callback=None) -> TrainingState:
    for _ in range(steps):
        batch = select_batch(queries, config, state.step)
        state, report = train_step(state, batch, config)
        if callback is not None:
            callback(state, report)
    return state


def format_metrics_csv(rows: Sequence[dict], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)
