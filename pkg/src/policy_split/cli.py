"""Command-line entry point: gen-corpus, pretrain, train, eval, analyze.

Configuration is a flat YAML mapping; command-line flags override it.
Outputs go to ``--out``::

    train.tsv, eval.tsv          query sets
    pretrained.ckpt              supervised starting point
    checkpoints/step_XXXXXX.ckpt training checkpoints (with optimizer moments)
    metrics.csv                  one row per step per sampled mode
    report_<name>.csv / .txt     analysis output
    config.effective.yaml        the merged configuration
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .core_math import HIGH_ENTROPY, NORMAL
from .environment import (
    TaskKind,
    canonical_solution,
    default_max_len,
    generate_corpus,
    read_query_set,
    verify,
    write_query_set,
)
from .errors import ConfigError, IncompatibleCheckpointError, NumericError, ResourceError, ValidationError
from .optim import AdamMoments
from .policy import (
    TABULAR,
    Context,
    PolicyParameters,
    default_dims,
    init_policy,
    load_checkpoint,
    mean_entropy_bits,
    sample_batch,
    save_checkpoint,
    supervised_pretrain,
)
from .trainer import METHODS, TrainConfig, TrainingState, format_metrics_csv, select_batch, train_step

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    task_kind: str = TaskKind.MULTI_PATH_SUM.value
    difficulty: int = 2
    n_train: int = 32
    n_eval: int = 32
    eval_split: str = "train"  # tabular policies do not generalise across queries
    eval_runs: int = 8
    best_of: int = 8
    steps: int = 200
    checkpoint_every: int = 50
    pretrain_steps: int = 60
    pretrain_lr: float = 0.1
    architecture: str = TABULAR
    prefix_rows: int | None = None  # tabular only; 0 gives a prefix-insensitive policy
    out: str = "runs/default"

    RUN_KEYS = ("task_kind", "difficulty", "n_train", "n_eval", "eval_split", "eval_runs", "best_of", "steps",
                "checkpoint_every", "pretrain_steps", "pretrain_lr", "architecture", "prefix_rows", "out")

    def __post_init__(self):
        TaskKind(self.task_kind)
        if self.eval_split not in ("train", "eval"):
            raise ConfigError("eval_split must be 'train' or 'eval'")
        for name in ("n_train", "eval_runs", "best_of", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0 or self.pretrain_steps < 0 or self.n_eval < 0:
            raise ConfigError("steps, pretrain_steps and n_eval must be >= 0")
        if self.prefix_rows is not None and (self.architecture != TABULAR or self.prefix_rows < 0):
            raise ConfigError("prefix_rows applies to the tabular architecture and must be >= 0")

    @property
    def dims(self) -> tuple[int, ...]:
        dims = default_dims(self.architecture)
        if self.prefix_rows is not None:
            dims = dims[:2] + (self.prefix_rows,)
        return dims

    @property
    def max_len(self) -> int:
        return default_max_len(self.task_kind, self.difficulty)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        train_keys = set(TrainConfig.field_names())
        unknown = set(mapping) - train_keys - set(cls.RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        run_kw = {k: v for k, v in mapping.items() if k in cls.RUN_KEYS}
        train_kw = {k: v for k, v in mapping.items() if k in train_keys}
        cfg = cls(train=TrainConfig(**train_kw), **run_kw)
        if "max_len" not in train_kw:
            cfg.train.max_len = cfg.max_len
        return cfg

    def to_mapping(self) -> dict:
        flat = {k: getattr(self, k) for k in self.RUN_KEYS}
        flat.update(self.train.to_dict())
        return flat

    def config_hash(self) -> str:
        """Hash of everything that shapes the trajectory (not where it stops or is written)."""
        payload = {k: v for k, v in self.to_mapping().items() if k not in ("out", "steps")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | None, overrides: dict) -> RunConfig:
    mapping = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        mapping = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(mapping, dict):
            raise ConfigError(f"{p}: expected a flat key-value mapping")
        nested = [k for k, v in mapping.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"{p}: nested values not allowed ({', '.join(nested)})")
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(mapping)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.yaml").write_text(yaml.safe_dump(cfg.to_mapping(), sort_keys=True), encoding="utf-8")
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------- commands


def cmd_gen_corpus(cfg: RunConfig) -> None:
    out = _out(cfg)
    seed = cfg.train.seed
    train = generate_corpus(seed, range(cfg.n_train), cfg.task_kind, cfg.difficulty)
    evalq = generate_corpus(seed, range(cfg.n_train, cfg.n_train + cfg.n_eval), cfg.task_kind, cfg.difficulty)
    write_query_set(out / "train.tsv", train)
    write_query_set(out / "eval.tsv", evalq)
    print(f"wrote {len(train)} train and {len(evalq)} eval {cfg.task_kind} queries to {out}")


def greedy_accuracy(params: PolicyParameters, queries, max_len: int) -> float:
    contexts = [Context(q.query_tokens) for q in queries]
    rngs = [np.random.default_rng([q.id, 0x6EED]) for q in queries]
    samples = sample_batch(params, contexts, rngs, max_len, 1.0, top_k=1)
    return float(np.mean([verify(q, s.tokens, params.vocab).reward for q, s in zip(queries, samples)]))


def cmd_pretrain(cfg: RunConfig) -> None:
    out = _out(cfg)
    train = read_query_set(_require(out / "train.tsv", "train corpus"))
    data = [(Context(q.query_tokens), canonical_solution(q, cfg.max_len)) for q in train]
    params = init_policy(architecture=cfg.architecture, dims=cfg.dims, seed=cfg.train.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        params = supervised_pretrain(params, data, cfg.pretrain_steps, cfg.pretrain_lr)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_checkpoint(out / "pretrained.ckpt", params, cfg.config_hash(), meta={"stage": "pretrain"})
    ent = mean_entropy_bits(params, data)
    acc = greedy_accuracy(params, train, cfg.max_len)
    res = analysis.evaluate_mode(params, _eval_queries(cfg, out), NORMAL, cfg.eval_runs, seed=cfg.train.seed)
    print(f"pretrained: teacher-forced entropy {ent:.3f} bits, greedy train accuracy {acc:.3f}, "
          f"eval accuracy {res.accuracy:.3f}, eval entropy {res.mean_entropy_bits:.3f} bits")


def _checkpoint_dir(out: Path) -> Path:
    return out / "checkpoints"


def _latest_checkpoint(out: Path) -> Path | None:
    ckpts = sorted(_checkpoint_dir(out).glob("step_*.ckpt"))
    return ckpts[-1] if ckpts else None


def save_training_state(path: Path, state: TrainingState, cfg: RunConfig) -> None:
    discoveries = {mode: sorted([qid, list(tokens)] for qid, tokens in found)
                   for mode, found in sorted(state.discoveries.items())}
    save_checkpoint(path, state.params, cfg.config_hash(),
                    extra={"adam_m": state.moments.m, "adam_v": state.moments.v},
                    meta={"step": state.step, "adam_t": state.moments.t, "discoveries": discoveries})


def load_training_state(path: Path) -> TrainingState:
    params, extra, header = load_checkpoint(path)
    meta = header["meta"]
    if "adam_m" not in extra or "step" not in meta:
        raise IncompatibleCheckpointError(f"{path}: not a training checkpoint")
    moments = AdamMoments(extra["adam_m"], extra["adam_v"], int(meta["adam_t"]))
    discoveries = {mode: {(qid, tuple(tokens)) for qid, tokens in found}
                   for mode, found in meta.get("discoveries", {}).items()}
    return TrainingState(params, int(meta["step"]), moments, [], discoveries)


def cmd_train(cfg: RunConfig) -> None:
    out = _out(cfg)
    train = read_query_set(_require(out / "train.tsv", "train corpus"))
    metrics = out / "metrics.csv"
    latest = _latest_checkpoint(out)
    if latest is not None:
        state = load_training_state(latest)
        print(f"resuming from {latest} (step {state.step})")
        _truncate_metrics(metrics, state.step)
    else:
        params, _, _ = load_checkpoint(_require(out / "pretrained.ckpt", "pretrained checkpoint"))
        state = TrainingState(params)
        metrics.write_text(format_metrics_csv([]), encoding="utf-8")
    _checkpoint_dir(out).mkdir(exist_ok=True)
    tc = cfg.train
    with open(metrics, "a", encoding="utf-8") as fh:
        while state.step < cfg.steps:
            batch = select_batch(train, tc, state.step)
            try:
                state, report = train_step(state, batch, tc)
            except NumericError as exc:
                dump = out / "numeric_abort.json"
                dump.write_text(json.dumps({"step": state.step, "message": str(exc),
                                            "diagnostics": exc.diagnostics}, default=str, indent=2))
                print(f"numeric abort at step {state.step}; diagnostics in {dump}", file=sys.stderr)
                raise
            fh.write(format_metrics_csv(report.rows, header=False))
            fh.flush()
            state.history.clear()  # rows already streamed to disk
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                save_training_state(_checkpoint_dir(out) / f"step_{state.step:06d}.ckpt", state, cfg)
    print(f"trained {tc.method} to step {state.step}; metrics in {metrics}")


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        path.write_text(format_metrics_csv([]), encoding="utf-8")
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
    path.write_text("".join(kept), encoding="utf-8")


def _eval_queries(cfg: RunConfig, out: Path):
    name = "train.tsv" if cfg.eval_split == "train" else "eval.tsv"
    return read_query_set(_require(out / name, f"{cfg.eval_split} corpus"))


def _resolve_checkpoint(out: Path, checkpoint: str | None) -> Path:
    if checkpoint:
        return _require(Path(checkpoint), "checkpoint")
    latest = _latest_checkpoint(out)
    return latest if latest is not None else _require(out / "pretrained.ckpt", "checkpoint")


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> None:
    out = _out(cfg)
    path = _resolve_checkpoint(out, checkpoint)
    params, _, _ = load_checkpoint(path)
    queries = _eval_queries(cfg, out)
    print(f"{'mode':<8}{'acc':>8}{'best@' + str(cfg.best_of):>9}{'ent(bits)':>11}{'len':>7}")
    for mode in (NORMAL, HIGH_ENTROPY):
        res = analysis.evaluate_mode(params, queries, mode, cfg.eval_runs, seed=cfg.train.seed)
        bon = analysis.best_of_n(params, queries, mode, cfg.best_of, seed=cfg.train.seed)
        print(f"{mode:<8}{res.accuracy:>8.3f}{bon:>9.3f}{res.mean_entropy_bits:>11.3f}{res.mean_length:>7.2f}")


def cmd_analyze(cfg: RunConfig, checkpoint: str | None = None) -> None:
    out = _out(cfg)
    path = _resolve_checkpoint(out, checkpoint)
    params, _, _ = load_checkpoint(path)
    queries = _eval_queries(cfg, out)
    records = analysis.analyze(params, queries, path.stem, cfg.eval_runs, cfg.best_of, cfg.train.seed)
    analysis.write_report(out / f"report_{path.stem}.csv", records)
    summary = analysis.summary_table(records)
    (out / f"report_{path.stem}.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policy-split", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker bound (evaluation runs single-process)")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint file (default: latest in --out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, {"seed": args.seed, "method": args.method, "out": args.out})
        fn = COMMANDS[args.command]
        if args.command in ("eval", "analyze"):
            fn(cfg, args.checkpoint)
        else:
            fn(cfg)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ConfigError, IncompatibleCheckpointError, ResourceError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
