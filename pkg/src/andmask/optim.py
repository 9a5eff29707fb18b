"""Plain/momentum GD, Adam, temporal AND-mask Adam and the training loop."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .masking import aggregate
from .model import (
    Architecture,
    LossConfig,
    ParamVector,
    env_gradients,
    forward,
    init_params,
    loss_and_grad,
    penalty_grad,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_acc", "test_acc", "train_loss", "mask_keep_frac")


def _finite(g):
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def gd_step(params: np.ndarray, agg_grad: np.ndarray, eta: float) -> np.ndarray:
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    return params - eta * _finite(agg_grad)


@dataclass
class AdamState:
    """Moments for Adam; ``a`` is the sign EMA used only by the temporal variant.

    ``eps`` sits inside the square root, ``sqrt(v_hat + eps)``; the default
    1e-16 behaves like the usual 1e-8 added outside.
    """

    m: np.ndarray
    v: np.ndarray
    a: np.ndarray
    step_count: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9
    eps: float = 1e-16
    tau: float = 0.5
    weight_decay: float = 0.0
    bias_correction: bool = True

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), **kw)

    def __post_init__(self):
        for b in (self.beta1, self.beta2, self.beta3):
            if not 0.0 <= b < 1.0:
                raise ValueError("betas must lie in [0, 1)")
        if not self.alpha > 0 or not self.eps > 0:
            raise ValueError("alpha and eps must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


def _moments(state: AdamState, g: np.ndarray) -> AdamState:
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    return replace(state, m=m, v=v, step_count=state.step_count + 1)


def _adam_direction(state: AdamState) -> np.ndarray:
    m, v = state.m, state.v
    if state.bias_correction:
        t = state.step_count
        m = m / (1 - state.beta1**t)
        v = v / (1 - state.beta2**t)
    return m / np.sqrt(v + state.eps)


def adam_step(state: AdamState, params: np.ndarray, agg_grad: np.ndarray):
    """One Adam update; returns ``(state', params')``."""
    g = _finite(agg_grad)
    if g.shape != state.m.shape or params.shape != g.shape:
        raise ValueError("state, params and gradient must have the same length")
    state = _moments(state, g)
    return state, params - state.alpha * _adam_direction(state)


def temporal_and_adam_step(state: AdamState, params: np.ndarray, grad_t: np.ndarray):
    """Adam whose update is gated by an EMA of gradient signs across steps.

    The moments always absorb ``grad_t``; a component moves only when the
    sign EMA ``|a|`` has reached ``tau``. Weight decay, if set, is a separate
    decoupled shrink applied after the gated step.
    """
    g = _finite(grad_t)
    if g.shape != state.m.shape or params.shape != g.shape:
        raise ValueError("state, params and gradient must have the same length")
    state = _moments(state, g)
    a = state.beta3 * state.a + (1 - state.beta3) * np.sign(g)
    state = replace(state, a=a)
    b = np.abs(a) >= state.tau
    new = params - state.alpha * _adam_direction(state) * b
    if state.weight_decay:
        new = new - state.alpha * state.weight_decay * new
    return state, new


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    mask_rule: str = "none"
    tau: float = 1.0
    rescale: bool = False
    learning_rate: float = 1e-2
    batch_size: int = 128
    epochs: int = 40
    lr_drop_epochs: Optional[Sequence[tuple]] = None
    seed: int = 0
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    dropout_rate: float = 0.0
    momentum: float = 0.0
    batching: str = "auto"
    per_env_batch: bool = False
    envs_per_step: Optional[int] = None
    early_stop: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("gd", "adam", "temporal_adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_rule not in ("none", "and", "xor", "geometric"):
            raise ValueError(f"unknown mask_rule {self.mask_rule!r}")
        if self.batching not in ("auto", "env", "pooled"):
            raise ValueError(f"unknown batching {self.batching!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be finite and positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.envs_per_step is not None and self.envs_per_step < 1:
            raise ValueError("envs_per_step must be >= 1")
        if self.mask_rule != "none" and self.batching == "pooled":
            raise ValueError("masking needs per-environment batches")
        if self.optimizer == "temporal_adam" and self.mask_rule != "none":
            raise ValueError("temporal_adam masks over time; set mask_rule='none'")
        self.loss_config  # validates the penalty/dropout fields

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.l1_coeff, self.l2_coeff, self.dropout_rate)

    @property
    def env_batching(self) -> bool:
        if self.batching == "auto":
            return self.mask_rule != "none" or self.optimizer == "temporal_adam"
        return self.batching == "env"

    def schedule(self) -> list[tuple[int, float]]:
        """(epoch, factor) pairs; default is x0.1 at 1/2 and again at 3/4 of training."""
        if self.lr_drop_epochs is not None:
            return sorted((int(e), float(f)) for e, f in self.lr_drop_epochs)
        return [(self.epochs // 2, 0.1), ((3 * self.epochs) // 4, 0.1)]

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for e, f in self.schedule():
            if 0 < e <= epoch:
                lr *= f
        return lr


@dataclass
class TrainResult:
    params: ParamVector
    metrics: list = field(default_factory=list)
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def metrics_csv(self, provenance: Optional[str] = None) -> str:
        return metrics_to_csv(self.metrics, provenance)


def metrics_to_csv(rows: Sequence[dict], provenance: Optional[str] = None, columns=METRIC_COLUMNS) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def accuracy(params: ParamVector, X, y, chunk: int = 4096) -> float:
    if len(y) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(y), chunk):
        hits += int((forward(params, X[s:s + chunk]).argmax(axis=1) == y[s:s + chunk]).sum())
    return hits / len(y)


def mean_data_loss(params: ParamVector, X, y, chunk: int = 4096) -> float:
    total = 0.0
    for s in range(0, len(y), chunk):
        z = forward(params, X[s:s + chunk])
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total -= logp[np.arange(len(z)), y[s:s + chunk]].sum()
    return total / len(y)


class _Optimizer:
    def __init__(self, cfg: TrainConfig, n: int):
        self.cfg = cfg
        self.velocity = np.zeros(n)
        self.state = AdamState.zeros(
            n, alpha=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, beta3=cfg.beta3,
            tau=cfg.tau,
        )

    def step(self, values, grad, lr):
        opt = self.cfg.optimizer
        if opt == "gd":
            if self.cfg.momentum:
                self.velocity = self.cfg.momentum * self.velocity + _finite(grad)
                return gd_step(values, self.velocity, lr)
            return gd_step(values, grad, lr)
        self.state = replace(self.state, alpha=lr)
        if opt == "adam":
            self.state, values = adam_step(self.state, values, grad)
        else:
            self.state, values = temporal_and_adam_step(self.state, values, grad)
        return values


def train(
    model: Union[Architecture, ParamVector],
    dataset,
    cfg: TrainConfig,
    test=None,
    eval_sets: Optional[dict] = None,
    workers: int = 1,
) -> TrainResult:
    """Train on an :class:`~andmask.data.EnvDataset` and log per-epoch metrics.

    With per-environment batching every step draws ``batch_size // d``
    examples from each of the ``d`` environments and combines the ``d``
    gradients by ``cfg.mask_rule``; otherwise a pooled shuffled batch is
    used. Penalty gradients are added after aggregation, so masks only see
    data gradients. ``eval_sets`` maps a name to ``(X, y)`` and adds an
    ``<name>_acc`` entry to each metrics row.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    params = init_params(model, cfg.seed) if isinstance(model, Architecture) else model
    if params.arch.input_dim != dataset.X.shape[1]:
        raise ValueError("architecture input_dim does not match the dataset")
    rng = np.random.default_rng([cfg.seed, 1])
    data_cfg = LossConfig(0.0, 0.0, cfg.dropout_rate)
    pen_cfg = cfg.loss_config
    opt = _Optimizer(cfg, params.n)
    values = params.values.copy()
    layout = params.layout
    X, y = dataset.X, dataset.y

    groups = dataset.env_indices()
    env_ids = sorted(groups)
    d = len(env_ids)
    if cfg.env_batching:
        if cfg.optimizer == "temporal_adam":
            per_env = cfg.batch_size
            steps = sum(len(groups[e]) // per_env for e in env_ids)
        else:
            k = d if cfg.envs_per_step is None else min(cfg.envs_per_step, d)
            per_env = cfg.batch_size if cfg.per_env_batch else max(1, cfg.batch_size // k)
            # one epoch visits every example of the smallest environment once
            steps = (min(len(groups[e]) for e in env_ids) // per_env) * (d // k)
        if steps < 1:
            raise ValueError("environments too small for the requested batch size")
    else:
        steps = max(1, len(y) // cfg.batch_size)

    result = TrainResult(params)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch - 1)
        keep = []
        if cfg.env_batching and cfg.optimizer == "temporal_adam":
            order = [(e, rng.permutation(groups[e])) for e in env_ids]
            blocks = [
                (e, perm[s * per_env:(s + 1) * per_env])
                for e, perm in order
                for s in range(len(perm) // per_env)
            ]
            for k in rng.permutation(len(blocks)):
                _, idx = blocks[k]
                p = params.replace(values)
                _, g = loss_and_grad(p, X[idx], y[idx], data_cfg, rng)
                g = g + penalty_grad(values, pen_cfg)
                values = opt.step(values, g, lr)
                keep.append(float(np.mean(np.abs(opt.state.a) >= opt.state.tau)))
        elif cfg.env_batching:
            perms = [rng.permutation(groups[e]) for e in env_ids]
            rounds = steps // (d // k)
            schedule = [
                (r, sorted(chunk.tolist()))
                for r in range(rounds)
                for chunk in np.array_split(rng.permutation(d), d // k)
            ] if k < d else [(r, list(range(d))) for r in range(rounds)]
            for r, members in schedule:
                batches = [
                    (env_ids[i], X[perms[i][r * per_env:(r + 1) * per_env]],
                     y[perms[i][r * per_env:(r + 1) * per_env]])
                    for i in members
                ]
                p = params.replace(values)
                gb = env_gradients(p, batches, data_cfg, rng, workers=workers)
                agg, mask = aggregate(gb, cfg.mask_rule, cfg.tau, layout, cfg.rescale)
                g = agg.values + penalty_grad(values, pen_cfg)
                values = opt.step(values, g, lr)
                keep.append(1.0 if mask is None else mask.keep_fraction)
        else:
            perm = rng.permutation(len(y))
            for s in range(steps):
                idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                p = params.replace(values)
                _, g = loss_and_grad(p, X[idx], y[idx], data_cfg, rng)
                g = g + penalty_grad(values, pen_cfg)
                values = opt.step(values, g, lr)
                keep.append(1.0)

        p = params.replace(values)
        row = {
            "epoch": epoch,
            "train_acc": accuracy(p, X, y),
            "test_acc": accuracy(p, test.X, test.y) if test is not None else float("nan"),
            "train_loss": mean_data_loss(p, X, y),
            "mask_keep_frac": float(np.mean(keep)),
        }
        for name, (Xe, ye) in (eval_sets or {}).items():
            row[f"{name}_acc"] = accuracy(p, Xe, ye)
        result.metrics.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if cfg.early_stop and row["train_acc"] > 0.97 and row["test_acc"] < 0.6:
            result.stopped_early = True
            break

    result.params = params.replace(values)
    return result
