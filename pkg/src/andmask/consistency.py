"""Cross-environment consistency of a minimizer.

The score explores, for each source environment, the region around
``theta*`` where that environment's loss stays within ``epsilon`` of its
value at ``theta*``, and records how much the other environments' losses
move there. Exploration is a random walk whose accepted points form a
chain inside the level set, so the result is a lower bound on the true
maximum.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .model import Architecture, ParamVector, data_loss

LossFn = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class WalkConfig:
    epsilon: float = 0.01
    step_scale: float = 0.01
    num_steps: int = 20000
    num_restarts: int = 1
    seed: int = 0
    tune_steps: int = 2000
    accept_low: float = 0.3
    accept_high: float = 0.6

    def __post_init__(self):
        if not (self.epsilon > 0 and self.step_scale > 0):
            raise ValueError("epsilon and step_scale must be positive")
        if self.num_steps < 1 or self.num_restarts < 1:
            raise ValueError("num_steps and num_restarts must be >= 1")
        if self.tune_steps < 0:
            raise ValueError("tune_steps must be >= 0")
        if not 0 < self.accept_low < self.accept_high < 1:
            raise ValueError("need 0 < accept_low < accept_high < 1")


@dataclass
class ConsistencyReport:
    score: float
    per_pair: dict
    samples_accepted: int
    epsilon: float
    proposals: int = 0
    step_scales: dict = field(default_factory=dict)
    discrepancy: str = "anchored"

    @property
    def acceptance_rate(self) -> float:
        return self.samples_accepted / self.proposals if self.proposals else float("nan")

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "epsilon": self.epsilon,
            "discrepancy": self.discrepancy,
            "per_pair": [
                {"source": str(e), "target": str(t), "max_gap": v}
                for (e, t), v in sorted(self.per_pair.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))
            ],
            "sampler": {
                "samples_accepted": self.samples_accepted,
                "proposals": self.proposals,
                "acceptance_rate": self.acceptance_rate,
                "step_scales": {str(k): v for k, v in sorted(self.step_scales.items(), key=lambda kv: str(kv[0]))},
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _walk(source: LossFn, targets: Sequence[LossFn], theta_star, wcfg: WalkConfig, rng, discrepancy):
    """One constrained random walk; returns (per-target max gap, accepted, proposals, step)."""
    theta = np.array(theta_star, dtype=np.float64)
    base = source(theta)
    target_base = np.array([f(theta) for f in targets])
    best = np.zeros(len(targets))
    step = wcfg.step_scale
    accepted = 0
    window_acc = 0
    for k in range(wcfg.num_steps):
        prop = theta + step * rng.standard_normal(theta.size)
        val = source(prop)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss during level-set walk")
        if abs(val - base) <= wcfg.epsilon:
            theta = prop
            accepted += 1
            window_acc += 1
            tv = np.array([f(theta) for f in targets])
            if not np.all(np.isfinite(tv)):
                raise FloatingPointError("non-finite loss during level-set walk")
            ref = target_base if discrepancy == "anchored" else val
            np.maximum(best, np.abs(tv - ref), out=best)
        if k < wcfg.tune_steps and (k + 1) % 100 == 0:
            rate = window_acc / 100
            if rate < wcfg.accept_low:
                step /= 1.5
            elif rate > wcfg.accept_high:
                step *= 1.5
            window_acc = 0
    return best, accepted, wcfg.num_steps, step


def inconsistency_score(
    theta_star,
    env_losses,
    wcfg: WalkConfig = WalkConfig(),
    discrepancy: str = "anchored",
    workers: int = 1,
) -> ConsistencyReport:
    """Lower-bound estimate of the worst cross-environment loss gap near ``theta_star``.

    ``env_losses`` maps env id to a loss function of the flat parameters (a
    plain list is keyed by position). For every source environment ``e`` a
    walk keeps ``|L_e(theta) - L_e(theta*)| <= epsilon``; at each accepted
    point the gap to every other environment ``e'`` is

    * ``anchored``: ``|L_e'(theta) - L_e'(theta*)|``, how far ``e'`` moves
      while ``e`` is held within ``epsilon`` (this is the quantity whose
      quadratic closed form is ``epsilon * max ratio``);
    * ``pointwise``: ``|L_e'(theta) - L_e(theta)|``.

    Walk ``r`` of every source uses the generator seeded by ``(seed, r)``,
    so relabelling environments does not change the score.
    """
    if discrepancy not in ("anchored", "pointwise"):
        raise ValueError("discrepancy is 'anchored' or 'pointwise'")
    if not isinstance(env_losses, Mapping):
        env_losses = dict(enumerate(env_losses))
    ids = list(env_losses)
    if len(ids) < 2:
        raise ValueError("need at least two environments")

    jobs = [(e, r) for e in ids for r in range(wcfg.num_restarts)]

    def run(job):
        e, r = job
        targets = [t for t in ids if t != e]
        rng = np.random.default_rng([wcfg.seed, r])
        best, acc, props, step = _walk(
            env_losses[e], [env_losses[t] for t in targets], theta_star, wcfg, rng, discrepancy
        )
        return e, targets, best, acc, props, step

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    per_pair: dict = {}
    steps: dict = {}
    accepted = proposals = 0
    for e, targets, best, acc, props, step in results:
        for t, v in zip(targets, best):
            per_pair[(e, t)] = max(per_pair.get((e, t), 0.0), float(v))
        steps.setdefault(e, []).append(step)
        accepted += acc
        proposals += props
    score = max(per_pair.values())
    return ConsistencyReport(
        score, per_pair, accepted, wcfg.epsilon, proposals,
        {e: float(np.mean(s)) for e, s in steps.items()}, discrepancy,
    )


@dataclass(frozen=True)
class QuadraticEnvPair:
    """Two environments with diagonal Hessians and a shared zero-loss minimum at 0."""

    lamA: np.ndarray
    lamB: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.lamA, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.lamB, dtype=np.float64))
        if a.shape != b.shape:
            raise ValueError("eigenvalue vectors must have the same length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("eigenvalues must be strictly positive")
        object.__setattr__(self, "lamA", a)
        object.__setattr__(self, "lamB", b)

    def losses(self) -> dict:
        a, b = self.lamA, self.lamB
        return {
            "A": lambda th: 0.5 * float(a @ (th * th)),
            "B": lambda th: 0.5 * float(b @ (th * th)),
        }


def _positive(lams):
    lams = np.asarray(lams, dtype=np.float64)
    if np.any(lams <= 0):
        raise ValueError("eigenvalues must be strictly positive")
    return lams


def quadratic_inconsistency(pair: QuadraticEnvPair, epsilon: float) -> float:
    """``epsilon * max_i max(lamB_i/lamA_i, lamA_i/lamB_i)``."""
    r = pair.lamB / pair.lamA
    return float(epsilon * np.max(np.maximum(r, 1.0 / r)))


def hessian_means(lams) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise arithmetic and geometric means of stacked Hessian diagonals.

    Accepts a :class:`QuadraticEnvPair` or a ``(num_envs, n)`` array.
    """
    if isinstance(lams, QuadraticEnvPair):
        lams = np.stack([lams.lamA, lams.lamB])
    lams = _positive(np.atleast_2d(lams))
    return lams.mean(axis=0), np.exp(np.log(lams).mean(axis=0))


def det_ratio(pair: QuadraticEnvPair) -> float:
    """det of the arithmetic-mean Hessian over det of the geometric-mean Hessian."""
    arith, geom = hessian_means(pair)
    return float(np.exp(np.log(arith).sum() - np.log(geom).sum()))


def det_ratio_bound(pair: QuadraticEnvPair, epsilon: float) -> float:
    return 2.0 * epsilon * det_ratio(pair) ** 2


def network_env_losses(params: ParamVector, dataset, max_per_env: Optional[int] = None) -> dict:
    """Per-environment data losses (no penalties) as functions of flat parameters."""
    arch = params.arch
    layout = params.layout
    out = {}
    for e, idx in dataset.env_indices().items():
        if max_per_env is not None:
            idx = idx[:max_per_env]
        X, y = dataset.X[idx], dataset.y[idx]
        out[e] = _bind(arch, layout, X, y)
    return out


def _bind(arch: Architecture, layout, X, y):
    def f(theta):
        return data_loss(ParamVector(theta, arch, layout), X, y)
    return f


def ilc_score(
    train_recipe: Callable[[int], ParamVector],
    dataset,
    num_seeds: int,
    wcfg: WalkConfig = WalkConfig(),
    seeds: Optional[Sequence[int]] = None,
    max_per_env: Optional[int] = None,
    discrepancy: str = "anchored",
) -> float:
    """Negative mean inconsistency of the solutions ``train_recipe(seed)`` reaches.

    Runs that diverge (non-finite parameters or losses) are dropped with a
    warning that reports how many were excluded.
    """
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    seeds = list(range(num_seeds)) if seeds is None else list(seeds)[:num_seeds]
    scores = []
    failed = 0
    for s in seeds:
        try:
            params = train_recipe(s)
            if hasattr(params, "params"):
                params = params.params
            losses = network_env_losses(params, dataset, max_per_env)
            report = inconsistency_score(params.values, losses, wcfg, discrepancy)
        except (FloatingPointError, ValueError) as exc:
            if isinstance(exc, ValueError) and "finite" not in str(exc):
                raise
            failed += 1
            continue
        scores.append(report.score)
    if failed:
        warnings.warn(f"{failed} of {len(seeds)} training runs diverged and were excluded", RuntimeWarning)
    if not scores:
        raise FloatingPointError("every training run diverged")
    return -float(np.mean(scores))


PATCHWORK_THETA = (100.0, -50.0, 100.0, -75.0, 1.0, 1.0)
PATCHWORK_THETA_TILDE = (100.0, -50.0, 100.0, -75.0, 1.0, -0.5)
# The figure caption prints theta_2 = -45 for both parameter vectors.
PATCHWORK_THETA_CAPTION = (100.0, -45.0, 100.0, -75.0, 1.0, 1.0)
PATCHWORK_THETA_TILDE_CAPTION = (100.0, -45.0, 100.0, -75.0, 1.0, -0.5)


def patchwork_target(x):
    x = np.asarray(x, dtype=np.float64)
    return np.select(
        [x < 0.4, x < 0.5, x < 0.7, x < 0.8],
        [0.0, 10 * (x - 0.4), 1.0, 10 * (x - 0.7) + 1],
        2.0,
    )


def patchwork_net(theta, x):
    """Two sigmoid units: ``t5*s(t1 x + t2) + t6*s(t3 x + t4)``."""
    t1, t2, t3, t4, t5, t6 = theta
    sig = lambda z: 0.5 * (1 + np.tanh(0.5 * z))  # noqa: E731  overflow-free logistic
    return t5 * sig(t1 * x + t2) + t6 * sig(t3 * x + t4)


def patchwork_envs(grid: int = 1000) -> dict:
    """Mean-squared-error losses for A = [0, 0.5) and B = [0.5, 1] on a uniform grid."""
    x = np.linspace(0.0, 1.0, grid)
    y = patchwork_target(x)
    out = {}
    for name, sel in (("A", x < 0.5), ("B", x >= 0.5)):
        xs, ys = x[sel], y[sel]
        out[name] = (lambda xs, ys: lambda th: float(np.mean((patchwork_net(th, xs) - ys) ** 2)))(xs, ys)
    return out


def _patchwork_eval(theta, theta_tilde, envs):
    la, lb = envs["A"], envs["B"]
    rep = {
        "theta_star": list(theta),
        "theta_tilde": list(theta_tilde),
        "L_A_star": la(np.array(theta)),
        "L_B_star": lb(np.array(theta)),
        "L_A_tilde": la(np.array(theta_tilde)),
        "L_B_tilde": lb(np.array(theta_tilde)),
    }
    rep["delta_L_A"] = abs(rep["L_A_tilde"] - rep["L_A_star"])
    rep["delta_L_B"] = abs(rep["L_B_tilde"] - rep["L_B_star"])
    rep["ratio"] = rep["delta_L_B"] / max(rep["delta_L_A"], 1e-6)
    rep["f_star_at_0.99"] = float(patchwork_net(theta, 0.99))
    return rep


def patchwork_demo(grid: int = 1000, wcfg: Optional[WalkConfig] = None) -> dict:
    """Evaluate the stitched two-unit solution and, optionally, its walk score.

    The caption variant (``theta_2 = -45``) is reported under ``"caption"``
    alongside the main numbers so the two can be compared.
    """
    envs = patchwork_envs(grid)
    report = _patchwork_eval(PATCHWORK_THETA, PATCHWORK_THETA_TILDE, envs)
    report["grid"] = grid
    report["caption"] = _patchwork_eval(PATCHWORK_THETA_CAPTION, PATCHWORK_THETA_TILDE_CAPTION, envs)
    if wcfg is not None:
        rep = inconsistency_score(np.array(PATCHWORK_THETA), envs, wcfg)
        report["inconsistency"] = rep.to_dict()
        report["score_over_epsilon"] = rep.score / wcfg.epsilon
    return report
