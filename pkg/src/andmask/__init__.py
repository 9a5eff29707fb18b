"""Environment-aware gradient masking for learning invariant mechanisms.

Submodules: ``model`` (MLP and per-environment gradients), ``masking``
(aggregation rules), ``optim`` (optimizers and the training loop),
``consistency`` (level-set inconsistency scores), ``data`` (synthetic
spirals-plus-shortcuts benchmark) and ``experiments`` (drivers behind the CLI).
"""
from .consistency import WalkConfig, inconsistency_score
from .data import EnvDataset, SyntheticConfig, gen_synthetic
from .estimator import AndMaskClassifier
from .masking import aggregate, and_mask, apply_mask, geometric_mean_grad, xor_mask
from .model import Architecture, GradientBatch, ParamVector, env_gradients, init_params
from .optim import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AndMaskClassifier",
    "Architecture",
    "EnvDataset",
    "GradientBatch",
    "ParamVector",
    "SyntheticConfig",
    "TrainConfig",
    "WalkConfig",
    "aggregate",
    "and_mask",
    "apply_mask",
    "env_gradients",
    "gen_synthetic",
    "geometric_mean_grad",
    "inconsistency_score",
    "init_params",
    "train",
    "xor_mask",
]
