"""Dense leaky-ReLU classifier on a flat parameter vector.

Everything here works on a single float64 vector ``theta`` plus an
:class:`Architecture`; weights are stored layer by layer as ``W`` (fan_in x
fan_out, row-major) followed by the bias ``b``. Forward and backward passes
broadcast over an optional leading environment axis, which is how
per-environment gradients are computed in one sweep.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_layers: int = 3
    hidden_units: int = 256
    activation_slope: float = 0.01
    output_classes: int = 2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.output_classes < 2:
            raise ValueError("output_classes must be >= 2")
        if not 0.0 <= self.activation_slope < 1.0:
            raise ValueError("activation_slope must lie in [0, 1)")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


@dataclass(frozen=True)
class Span:
    layer_id: str
    offset: int
    length: int


def make_layout(arch: Architecture) -> tuple[Span, ...]:
    spans = []
    offset = 0
    for k, (fan_in, fan_out) in enumerate(arch.layer_shapes()):
        spans.append(Span(f"W{k}", offset, fan_in * fan_out))
        offset += fan_in * fan_out
        spans.append(Span(f"b{k}", offset, fan_out))
        offset += fan_out
    return tuple(spans)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters together with the layout they were built from."""

    values: np.ndarray
    arch: Architecture
    layout: tuple[Span, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if not self.layout:
            object.__setattr__(self, "layout", make_layout(self.arch))
        _check_layout(self.layout, values.size)
        if values.ndim != 1 or values.size != self.arch.num_params:
            raise ValueError(
                f"expected {self.arch.num_params} parameters, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")

    @property
    def n(self) -> int:
        return self.values.size

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch, self.layout)

    def layer_sizes(self) -> np.ndarray:
        """Length of the span each component belongs to (used for mask rescaling)."""
        return np.array([s.length for s in self.layout])


def _check_layout(layout: Sequence[Span], n: int) -> None:
    pos = 0
    for span in sorted(layout, key=lambda s: s.offset):
        if span.offset != pos or span.length < 1:
            raise ValueError("layout spans must be contiguous, disjoint and nonempty")
        pos += span.length
    if pos != n:
        raise ValueError(f"layout covers {pos} entries but vector has {n}")


@dataclass
class GradientBatch:
    """One gradient row per environment, all taken at the same parameters."""

    grads: np.ndarray
    env_ids: list

    def __post_init__(self):
        self.grads = np.asarray(self.grads, dtype=np.float64)
        if self.grads.ndim != 2 or self.grads.shape[0] < 1:
            raise ValueError("grads must be a (d, n) matrix with d >= 1")
        if len(self.env_ids) != self.grads.shape[0]:
            raise ValueError("one env id per gradient row")
        if not np.isfinite(self.grads.sum()) and not np.all(np.isfinite(self.grads)):
            raise FloatingPointError("non-finite entry in gradient batch")

    @property
    def d(self) -> int:
        return self.grads.shape[0]

    @property
    def n(self) -> int:
        return self.grads.shape[1]

    def mean(self) -> np.ndarray:
        return self.grads.mean(axis=0)


@dataclass(frozen=True)
class LossConfig:
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("l1_coeff", "l2_coeff"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def data_only(self) -> "LossConfig":
        return LossConfig(0.0, 0.0, self.dropout_rate)


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_shapes():
        chunks.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), arch)


def unpack(values: np.ndarray, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of ``values`` as a list of ``(W, b)`` pairs."""
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_shapes():
        W = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _forward(values, arch, X, dropout_masks=None):
    """Returns logits and the cache needed by :func:`_backward`."""
    layers = unpack(values, arch)
    slope = arch.activation_slope
    acts = [X]
    pre = []
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        if k == len(layers) - 1:
            return z, (acts, pre)
        pre.append(z)
        h = _leaky(z, slope)
        if dropout_masks is not None:
            h = h * dropout_masks[k]
        acts.append(h)
    raise AssertionError("unreachable")


def _backward(values, arch, cache, delta, dropout_masks=None, out=None):
    """Backprop ``delta`` = dLoss/dlogits into a flat gradient.

    Leading axes of ``delta`` beyond the last two are kept, so a ``(d, b, c)``
    delta yields a ``(d, n)`` gradient block, written into ``out`` if given.
    """
    layers = unpack(values, arch)
    acts, pre = cache
    lead = delta.shape[:-2]
    if out is None:
        out = np.empty(lead + (values.size,))
    slope = arch.activation_slope
    offset = values.size
    for k in range(len(layers) - 1, -1, -1):
        W, b = layers[k]
        offset -= b.size
        np.sum(delta, axis=-2, out=out[..., offset:offset + b.size])
        offset -= W.size
        gW = out[..., offset:offset + W.size].reshape(lead + W.shape)
        np.matmul(np.swapaxes(acts[k], -1, -2), delta, out=gW)
        if k > 0:
            delta = delta @ W.T
            if dropout_masks is not None:
                delta = delta * dropout_masks[k - 1]
            delta = delta * np.where(pre[k - 1] > 0, 1.0, slope)
    return out


def _softmax_xent(logits, labels):
    """Per-example cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    nll = -(logp * onehot).sum(axis=-1)
    return nll, np.exp(logp) - onehot


def _check_inputs(X, arch):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != arch.input_dim:
        raise ValueError(f"input has {X.shape[-1]} features, architecture expects {arch.input_dim}")
    return X


def _check_labels(y, arch):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= arch.output_classes):
        raise ValueError("label index out of range")
    return y.astype(np.intp)


def dropout_masks(arch: Architecture, batch_shape, rate: float, rng: np.random.Generator):
    """Inverted-dropout masks, one per hidden layer."""
    keep = 1.0 - rate
    return [
        (rng.random(tuple(batch_shape) + (arch.hidden_units,)) < keep) / keep
        for _ in range(arch.hidden_layers)
    ]


def forward(params: ParamVector, inputs) -> np.ndarray:
    X = _check_inputs(inputs, params.arch)
    logits, _ = _forward(params.values, params.arch, X)
    return logits


def penalty(values: np.ndarray, cfg: LossConfig) -> float:
    return cfg.l1_coeff * np.abs(values).sum() + 0.5 * cfg.l2_coeff * values @ values


def penalty_grad(values: np.ndarray, cfg: LossConfig) -> np.ndarray:
    return cfg.l1_coeff * np.sign(values) + cfg.l2_coeff * values


def loss(logits, labels, params: ParamVector, cfg: LossConfig = LossConfig()) -> float:
    """Mean softmax cross-entropy plus ``l1*|theta|_1 + l2/2*|theta|^2``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, params.arch)
    nll, _ = _softmax_xent(logits, labels)
    return float(nll.mean() + penalty(params.values, cfg))


def data_loss(params: ParamVector, X, y) -> float:
    return loss(forward(params, X), y, params)


def loss_and_grad(params: ParamVector, X, y, cfg: LossConfig = LossConfig(), rng=None):
    """Loss and exact gradient on one batch (dropout only if ``rng`` is given)."""
    arch = params.arch
    X = _check_inputs(X, arch)
    y = _check_labels(y, arch)
    if len(y) == 0:
        raise ValueError("empty batch")
    masks = None
    if cfg.dropout_rate > 0 and rng is not None:
        masks = dropout_masks(arch, X.shape[:-1], cfg.dropout_rate, rng)
    logits, cache = _forward(params.values, arch, X, masks)
    nll, dlogits = _softmax_xent(logits, y)
    g = _backward(params.values, arch, cache, dlogits / len(y), masks)
    value = nll.mean() + penalty(params.values, cfg)
    return float(value), g + penalty_grad(params.values, cfg)


def _env_block(values, arch, Xs, ys, cfg, masks, out):
    """Gradients for a stack of equally sized env batches, shape (k, b, ·)."""
    logits, cache = _forward(values, arch, Xs, masks)
    _, dlogits = _softmax_xent(logits, ys)
    _backward(values, arch, cache, dlogits / ys.shape[-1], masks, out)
    if cfg.l1_coeff or cfg.l2_coeff:
        out += penalty_grad(values, cfg)


def env_gradients(
    params: ParamVector,
    env_batches: Sequence[tuple],
    cfg: LossConfig = LossConfig(),
    rng: Optional[np.random.Generator] = None,
    workers: int = 1,
) -> GradientBatch:
    """Exact gradient of each environment's mean loss.

    ``env_batches`` is a list of ``(env_id, X, y)``. Rows come back in the
    given order. Dropout masks (when ``cfg.dropout_rate > 0`` and ``rng`` is
    passed) are drawn once for the whole stack before any worker starts, so
    the result does not depend on ``workers``.
    """
    if not env_batches:
        raise ValueError("need at least one environment")
    arch = params.arch
    values = params.values
    ids = [eid for eid, _, _ in env_batches]
    Xs = [_check_inputs(X, arch) for _, X, _ in env_batches]
    ys = [_check_labels(y, arch) for _, _, y in env_batches]
    if any(len(y) == 0 for y in ys):
        raise ValueError("empty environment batch")
    d = len(ids)
    out = np.empty((d, values.size))
    sizes = {len(y) for y in ys}

    if len(sizes) == 1:
        X3 = np.stack(Xs)
        Y2 = np.stack(ys)
        masks = None
        if cfg.dropout_rate > 0 and rng is not None:
            masks = dropout_masks(arch, X3.shape[:-1], cfg.dropout_rate, rng)
        chunks = np.array_split(np.arange(d), max(1, min(workers, d)))

        def run(idx):
            sl = slice(idx[0], idx[-1] + 1)
            m = None if masks is None else [mk[sl] for mk in masks]
            _env_block(values, arch, X3[sl], Y2[sl], cfg, m, out[sl])

    else:
        all_masks = [
            dropout_masks(arch, X.shape[:-1], cfg.dropout_rate, rng)
            if cfg.dropout_rate > 0 and rng is not None else None
            for X in Xs
        ]
        chunks = np.array_split(np.arange(d), max(1, min(workers, d)))

        def run(idx):
            for e in idx:
                m = None if all_masks[e] is None else [mk[None] for mk in all_masks[e]]
                _env_block(values, arch, Xs[e][None], ys[e][None], cfg, m, out[e:e + 1])

    if workers <= 1:
        for idx in chunks:
            run(idx)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    return GradientBatch(out, ids)


def fd_hessian_diag(loss_fn, theta: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central second differences of ``loss_fn`` along each coordinate."""
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    f0 = loss_fn(theta)
    out = np.empty(theta.size)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + step
        fp = loss_fn(probe)
        probe[i] = theta[i] - step
        fm = loss_fn(probe)
        probe[i] = theta[i]
        out[i] = (fp - 2.0 * f0 + fm) / step**2
    return out


def hessian_diag(params: ParamVector, env_batch, cfg: LossConfig = LossConfig(), step: float = 1e-4):
    """Diagonal Hessian of one environment's loss (penalties included, no dropout).

    ``env_batch`` is ``(X, y)`` or ``(env_id, X, y)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    X, y = env_batch[-2:]
    X = _check_inputs(X, params.arch)
    y = _check_labels(y, params.arch)
    cfg = LossConfig(cfg.l1_coeff, cfg.l2_coeff)

    def f(theta):
        p = params.replace(theta)
        return loss(forward(p, X), y, p, cfg)

    return fd_hessian_diag(f, params.values, step)


def save_params(params: ParamVector, path) -> None:
    """Write ``{arch, layout, values}`` JSON; values at 17 significant digits."""
    head = json.dumps({"arch": asdict(params.arch), "layout": [asdict(s) for s in params.layout]})
    values = ", ".join(format(float(v), ".17g") for v in params.values)
    with open(path, "w") as fh:
        fh.write(head[:-1] + ', "values": [' + values + "]}\n")


def load_params(path) -> ParamVector:
    with open(path) as fh:
        doc = json.load(fh)
    arch = Architecture(**doc["arch"])
    layout = tuple(Span(**s) for s in doc["layout"])
    return ParamVector(np.array(doc["values"], dtype=np.float64), arch, layout)
