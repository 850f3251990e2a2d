"""Dual-mode (normal / high-entropy) policy optimisation on small verifiable tasks."""

from .core_math import HIGH_ENTROPY, NORMAL
from .environment import Query, TaskKind, generate_corpus, verify
from .policy import PolicyParameters, default_vocabulary, init_policy, load_checkpoint, save_checkpoint
from .trainer import METHODS, TrainConfig, TrainingState, train, train_step

__version__ = "0.1.0"

__all__ = [
    "HIGH_ENTROPY",
    "METHODS",
    "NORMAL",
    "PolicyParameters",
    "Query",
    "TaskKind",
    "TrainConfig",
    "TrainingState",
    "default_vocabulary",
    "generate_corpus",
    "init_policy",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_step",
    "verify",
]
