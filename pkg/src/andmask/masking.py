"""Rules for combining per-environment gradients into one update direction."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .model import GradientBatch

RULES = ("mean", "and_masked", "xor_masked", "geometric")


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray
    threshold_tau: float
    num_envs: int

    @property
    def keep_fraction(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 1.0


@dataclass(frozen=True)
class AggregatedGradient:
    values: np.ndarray
    rule: str


def _grads(gb) -> np.ndarray:
    return gb.grads if isinstance(gb, GradientBatch) else np.asarray(gb, dtype=np.float64)


def _check_tau(tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return float(tau)


def sign_agreement(gb) -> np.ndarray:
    """|sum_e sign(g_ej)| per component, as an integer vector."""
    g = _grads(gb)
    acc = np.int16 if g.shape[0] < 2**15 else np.int64
    pos = (g > 0).sum(axis=0, dtype=acc)
    neg = (g < 0).sum(axis=0, dtype=acc)
    return np.abs(pos.astype(np.int64) - neg)


def and_mask(gb, tau: float) -> Mask:
    """Keep component j iff ``tau * d <= |sum_e sign(g_ej)|``.

    ``sign(0) == 0``. ``tau = 0`` keeps everything (plain averaging).
    """
    tau = _check_tau(tau)
    g = _grads(gb)
    d = g.shape[0]
    thr = tau * d
    if abs(thr - round(thr)) < 1e-9:
        thr = float(round(thr))
    bits = (thr <= sign_agreement(g)).astype(np.int8)
    return Mask(bits, tau, d)


def and_mask_count(gb, t: int) -> Mask:
    """AND-mask stated as "at least ``t`` of ``d`` environments share the sign"."""
    g = _grads(gb)
    d = g.shape[0]
    if not d / 2 <= t <= d:
        raise ValueError(f"need d/2 <= t <= d, got d={d}, t={t}")
    agreeing = np.maximum((g > 0).sum(axis=0), (g < 0).sum(axis=0))
    return Mask((agreeing >= t).astype(np.int8), (2 * t - d) / d, d)


def xor_mask(gb, tau: float) -> Mask:
    """Complement of :func:`and_mask` at the same ``tau``."""
    m = and_mask(gb, tau)
    return Mask((1 - m.bits).astype(np.int8), m.threshold_tau, m.num_envs)


def geometric_mean_grad(gb) -> AggregatedGradient:
    """Element-wise signed geometric mean; zero unless all rows share a nonzero sign."""
    g = _grads(gb)
    signs = np.sign(g)
    agree = np.all(signs == signs[0], axis=0) & (signs[0] != 0)
    out = np.zeros(g.shape[1])
    if agree.any():
        # log domain keeps the product of many small magnitudes representable
        logmag = np.log(np.abs(g[:, agree])).mean(axis=0)
        out[agree] = signs[0, agree] * np.exp(logmag)
    return AggregatedGradient(out, "geometric")


def apply_mask(avg_grad, mask, layout=None, rescale: bool = False, rule: str = "and_masked") -> AggregatedGradient:
    """``avg_grad * mask``, optionally rescaled per layer by size / survivors.

    ``layout`` is a sequence of spans with ``offset`` and ``length``; it is
    only needed when ``rescale`` is set. Layers with no survivors stay zero.
    """
    avg_grad = np.asarray(avg_grad, dtype=np.float64)
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    if bits.shape != avg_grad.shape:
        raise ValueError(f"mask length {bits.shape} does not match gradient {avg_grad.shape}")
    out = avg_grad * bits
    if rescale:
        if layout is None:
            raise ValueError("rescaling needs the parameter layout")
        for span in layout:
            sl = slice(span.offset, span.offset + span.length)
            kept = int(bits[sl].sum())
            if kept:
                out[sl] *= span.length / kept
    return AggregatedGradient(out, rule)


def keep_probability(d: int, t: int) -> float:
    """Chance that a component survives ``t``-of-``d`` agreement on symmetric noise.

    ``2 * 2**-d * sum_{k=t}^{d} C(d, k)``. At ``t == d/2`` the two tails
    share the ``k = d/2`` term and the formula counts it twice.
    """
    if d < 1 or not (d / 2 <= t <= d):
        raise ValueError(f"need d/2 <= t <= d, got d={d}, t={t}")
    total = sum(comb(d, k) for k in range(int(t), d + 1))
    return float(2 * total) / 2.0**d


def threshold_count(d: int, tau: float) -> float:
    """Number of agreeing environments ``t = d/2 * (tau + 1)``."""
    return d / 2 * (_check_tau(tau) + 1)


def aggregate(gb, rule: str, tau: float = 0.0, layout=None, rescale: bool = False):
    """Combine a gradient batch under ``rule``; returns ``(AggregatedGradient, Mask | None)``."""
    g = _grads(gb)
    if rule in ("none", "mean"):
        return AggregatedGradient(g.mean(axis=0), "mean"), None
    if rule in ("and", "and_masked"):
        m = and_mask(g, tau)
        return apply_mask(g.mean(axis=0), m, layout, rescale), m
    if rule in ("xor", "xor_masked"):
        m = xor_mask(g, tau)
        return apply_mask(g.mean(axis=0), m, layout, rescale, "xor_masked"), m
    if rule == "geometric":
        agg = geometric_mean_grad(g)
        bits = (agg.values != 0).astype(np.int8)
        return agg, Mask(bits, 1.0, g.shape[0])
    raise ValueError(f"unknown aggregation rule {rule!r}")
