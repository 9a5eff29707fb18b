"""Experiment drivers: each returns plain rows and can write CSV/JSON artifacts.

Every driver is a pure function of its arguments (seeds included). Trials
can fan out over a process pool; results are gathered in trial order so
outputs do not depend on the worker count.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from math import comb
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .consistency import WalkConfig, inconsistency_score, network_env_losses, patchwork_demo
from .data import SyntheticConfig, gen_synthetic, permute_mechanism, permute_shortcut, shuffle_labels
from .masking import and_mask, and_mask_count, apply_mask, keep_probability, xor_mask
from .model import Architecture, env_gradients, init_params, load_params, save_params
from .optim import TrainConfig, accuracy, metrics_to_csv, train

# ---------------------------------------------------------------- presets

PAPER_SCALE = {"per_env": 1280}
DESK_SCALE = {"per_env": 256}

_COMMON = dict(optimizer="adam", learning_rate=1e-2, batch_size=128)
RECIPES = {
    "and_mask": dict(_COMMON, mask_rule="and", tau=1.0, rescale=True, l2_coeff=1e-4),
    "baseline": dict(_COMMON, mask_rule="none"),
    "l1": dict(_COMMON, mask_rule="none", l1_coeff=1e-5),
    "l2": dict(_COMMON, mask_rule="none", l2_coeff=1e-4),
    "dropout": dict(_COMMON, mask_rule="none", dropout_rate=0.5),
}


def recipe_config(name: str, epochs: int, seed: int, **overrides) -> TrainConfig:
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    kw = dict(RECIPES[name])
    kw.update(overrides)
    return TrainConfig(epochs=epochs, seed=seed, **kw)


def paper_epochs(num_envs: int) -> int:
    """floor(3000 / D) epochs."""
    return max(1, 3000 // num_envs)


# ---------------------------------------------------------------- output helpers


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def provenance_line(config: dict) -> str:
    return f"config_sha256={config_hash(config)}"


def rows_to_csv(rows: Sequence[dict], config: dict, columns: Optional[Sequence[str]] = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    return metrics_to_csv(rows, provenance_line(config), columns)


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _map(fn: Callable, jobs: Sequence, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------- suppression


def t_from_rule(d: int, t_rule) -> int:
    """``t_rule`` is a fraction (``t = ceil(f*d)``), ``"half"`` or a callable."""
    if callable(t_rule):
        return int(t_rule(d))
    if t_rule == "half":
        return int(math.ceil(d / 2))
    return int(math.ceil(float(t_rule) * d - 1e-12))


def suppression_upper_bound(n: int, d: int, t: int, sigma: float = 1.0) -> float:
    """``sigma^2 n (d - t) C(d, t) 2^(1-d)``."""
    return sigma**2 * n * (d - t) * comb(d, t) / 2.0 ** (d - 1)


def run_suppression(n: int = 3000, d_list: Sequence[int] = (4, 8, 16, 32, 64, 128, 256, 512),
                    t_rule="0.8", trials: int = 100, seed: int = 0) -> list[dict]:
    """Masked vs. unmasked gradient norms on i.i.d. standard-normal gradient batches."""
    if n < 1 or not d_list:
        raise ValueError("need n >= 1 and a nonempty d_list")
    rows = []
    for d in d_list:
        t = t_from_rule(d, t_rule)
        rng = np.random.default_rng([seed, d])
        avg_sq, masked_sq, kept = [], [], []
        for _ in range(trials):
            g = rng.standard_normal((d, n))
            avg = g.mean(axis=0)
            m = and_mask_count(g, t)
            avg_sq.append(avg @ avg)
            masked = avg * m.bits
            masked_sq.append(masked @ masked)
            kept.append(m.bits.mean())
        masked_sq = np.array(masked_sq)
        rows.append({
            "d": d,
            "t": t,
            "mean_sq_norm": float(np.mean(avg_sq)),
            "mean_sq_norm_masked": float(masked_sq.mean()),
            "frac_trials_masked_zero": float(np.mean(masked_sq == 0)),
            "n_over_d": n / d,
            "upper_bound": suppression_upper_bound(n, d, t),
            "keep_rate": float(np.mean(kept)),
            "keep_probability": keep_probability(d, t) if d / 2 <= t <= d else float("nan"),
        })
    return rows


# ---------------------------------------------------------------- correlation


@dataclass(frozen=True)
class CorrelationConfig:
    num_envs: int = 16
    batch_size: int = 1024
    hidden_layers: int = 3
    hidden_units: int = 256
    per_env: int = 256
    data_seed: int = 0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2:
        return float("nan")
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else float("nan")


def _correlation_seed(args):
    cfg, tau_grid, seed = args
    train_ds, _ = gen_synthetic(SyntheticConfig(num_envs=cfg.num_envs, per_env=cfg.per_env, seed=cfg.data_seed))
    mech_only = permute_shortcut(train_ds, seed=cfg.data_seed + 1)
    short_only = permute_mechanism(train_ds, seed=cfg.data_seed + 2)
    arch = Architecture(train_ds.X.shape[1], cfg.hidden_layers, cfg.hidden_units)
    params = init_params(arch, seed)
    per = max(1, cfg.batch_size // cfg.num_envs)
    rng = np.random.default_rng([seed, 7])
    idx = {e: rng.choice(ix, size=per, replace=False) for e, ix in train_ds.env_indices().items()}

    def batches(ds):
        return [(e, ds.X[ix], ds.y[ix]) for e, ix in sorted(idx.items())]

    gb = env_gradients(params, batches(train_ds))
    g_mech = env_gradients(params, batches(mech_only)).mean()
    g_short = env_gradients(params, batches(short_only)).mean()
    avg = gb.mean()
    rows = []
    for kind, rule in (("and", and_mask), ("xor", xor_mask)):
        for tau in tau_grid:
            m = rule(gb, tau)
            masked = apply_mask(avg, m).values
            nz = masked != 0
            rows.append({
                "seed": seed,
                "tau": float(tau),
                "mask_kind": kind,
                "rho_mechanism": pearson(masked[nz], g_mech[nz]),
                "rho_shortcut": pearson(masked[nz], g_short[nz]),
                "surviving_fraction": float(nz.mean()),
            })
    return rows


def run_correlation(cfg: CorrelationConfig = CorrelationConfig(),
                    tau_grid: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                    seeds: Sequence[int] = tuple(range(10)), workers: int = 1) -> list[dict]:
    """Correlate the masked average gradient with mechanism-only and shortcut-only gradients.

    All three gradients are taken at the same freshly initialised network and
    on the same example indices; only components the mask keeps (nonzero)
    enter the Pearson coefficient.
    """
    out = _map(_correlation_seed, [(cfg, tuple(tau_grid), s) for s in seeds], workers)
    return [row for rows in out for row in rows]


# ---------------------------------------------------------------- training sweeps


def _train_job(args):
    recipe, data_cfg, arch_kw, epochs, seed, overrides, noise = args
    train_ds, test_ds = gen_synthetic(data_cfg)
    shuffled = None
    if noise:
        fraction, mode = noise
        train_ds, shuffled = shuffle_labels(train_ds, fraction, seed=data_cfg.seed + 1000, mode=mode)
    arch = Architecture(train_ds.X.shape[1], **arch_kw)
    cfg = recipe_config(recipe, epochs, seed, **overrides)
    eval_sets = None
    if shuffled is not None and len(shuffled):
        clean = np.setdiff1d(np.arange(len(train_ds)), shuffled)
        eval_sets = {
            "shuffled": (train_ds.X[shuffled], train_ds.y[shuffled]),
            "clean": (train_ds.X[clean], train_ds.y[clean]),
        }
    res = train(arch, train_ds, cfg, test_ds, eval_sets=eval_sets)
    return res.metrics


def _job_overrides(overrides, recipe, early_stop):
    kw = dict((overrides or {}).get(recipe, {}))
    if early_stop:
        kw["early_stop"] = True
    return kw


def run_env_sweep(D_list: Sequence[int] = (16, 32, 64), recipes: Sequence[str] = ("and_mask", "baseline"),
                  seeds: Sequence[int] = tuple(range(5)), per_env: int = 256, epochs: Optional[int] = None,
                  hidden_layers: int = 3, hidden_units: int = 256, data_seed: int = 0,
                  overrides: Optional[dict] = None, early_stop: bool = False,
                  workers: int = 1) -> list[dict]:
    """Best-of-seeds final test accuracy per (D, recipe).

    Each row also carries the per-seed final accuracies. ``epochs`` defaults
    to ``floor(3000 / D)``. ``early_stop`` ends a trial once train accuracy
    exceeds 0.97 while test accuracy is below 0.6.
    """
    if list(D_list) != sorted(D_list):
        raise ValueError("D_list must be ascending")
    jobs = []
    for D in D_list:
        data_cfg = SyntheticConfig(num_envs=D, per_env=per_env, seed=data_seed)
        for r in recipes:
            for s in seeds:
                jobs.append((r, data_cfg, dict(hidden_layers=hidden_layers, hidden_units=hidden_units),
                             epochs or paper_epochs(D), s, _job_overrides(overrides, r, early_stop), None))
    results = _map(_train_job, jobs, workers)
    rows = []
    k = 0
    for D in D_list:
        for r in recipes:
            finals = []
            for s in seeds:
                finals.append(results[k][-1])
                k += 1
            rows.append({
                "D": D,
                "recipe": r,
                "best_test_acc": max(m["test_acc"] for m in finals),
                "test_accs": " ".join(format(m["test_acc"], ".4f") for m in finals),
                "train_accs": " ".join(format(m["train_acc"], ".4f") for m in finals),
            })
    return rows


def run_label_noise(fraction: float = 0.25, recipes: Sequence[str] = ("and_mask", "baseline"),
                    seeds: Sequence[int] = (0,), num_envs: int = 32, per_env: int = 256,
                    epochs: Optional[int] = None, hidden_layers: int = 3, hidden_units: int = 256,
                    data_seed: int = 0, mode: str = "flip", overrides: Optional[dict] = None,
                    early_stop: bool = False, workers: int = 1) -> list[dict]:
    """Per-epoch accuracy on corrupted and clean training subsets and on the o.o.d. test split.

    ``shuffled_acc`` is measured against the corrupted labels, so values
    below 0.5 mean the model predicts the original label despite the noise.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    data_cfg = SyntheticConfig(num_envs=num_envs, per_env=per_env, seed=data_seed)
    noise = (fraction, mode) if fraction > 0 else None
    jobs = [
        (r, data_cfg, dict(hidden_layers=hidden_layers, hidden_units=hidden_units),
         epochs or paper_epochs(num_envs), s, _job_overrides(overrides, r, early_stop), noise)
        for r in recipes for s in seeds
    ]
    results = _map(_train_job, jobs, workers)
    rows = []
    for (r, _, _, _, s, _, _), metrics in zip(jobs, results):
        for m in metrics:
            rows.append({
                "recipe": r,
                "seed": s,
                "epoch": m["epoch"],
                "shuffled_acc": m.get("shuffled_acc", float("nan")),
                "clean_acc": m.get("clean_acc", m["train_acc"]),
                "train_acc": m["train_acc"],
                "test_acc": m["test_acc"],
            })
    return rows


# ---------------------------------------------------------------- dispatch

KINDS = ("gen_data", "train", "suppress", "correlate", "consistency", "env_sweep", "label_noise", "patchwork")


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    kind: str
    output_path: str
    seed: Optional[int] = None
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown experiment kind {self.kind!r}")
        if not self.output_path:
            raise SpecError("output_path is required")
        stochastic = self.kind not in ("patchwork",)
        if stochastic and self.seed is None:
            raise SpecError(f"--seed is required for {self.kind}")
        p = self.params
        if self.kind == "train":
            if not p.get("dataset"):
                raise SpecError("train needs params.dataset (path to a dataset CSV)")
            if not Path(p["dataset"]).exists():
                raise SpecError(f"dataset not found: {p['dataset']}")
            if p.get("test") and not Path(p["test"]).exists():
                raise SpecError(f"test dataset not found: {p['test']}")
            _train_config_from(p, self.seed)
            _arch_kw(p)
        if self.kind == "consistency":
            if not p.get("model") or not Path(p["model"]).exists():
                raise SpecError("consistency needs params.model (path to a saved model)")
            if not p.get("dataset") or not Path(p["dataset"]).exists():
                raise SpecError("consistency needs params.dataset (path to a dataset CSV)")
            _walk_config_from(p, self.seed)
        if self.kind == "gen_data":
            _synthetic_config_from(p, self.seed)
        if self.kind == "suppress" and (int(p.get("n", 3000)) < 1 or not p.get("d_list", [4])):
            raise SpecError("suppress needs n >= 1 and a nonempty d_list")
        if self.kind == "label_noise" and not 0 <= float(p.get("fraction", 0.25)) < 1:
            raise SpecError("fraction must lie in [0, 1)")
        if self.kind == "env_sweep":
            D = list(p.get("D_list", [16, 32, 64]))
            if D != sorted(D):
                raise SpecError("D_list must be ascending")
        for r in p.get("recipes", []):
            if r not in RECIPES:
                raise SpecError(f"unknown recipe {r!r}")

    def resolved(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "params": self.params}


_TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}
_ARCH_KEYS = {"hidden_layers", "hidden_units", "activation_slope"}


def _train_config_from(p: dict, seed) -> TrainConfig:
    kw = {}
    if "recipe" in p:
        if p["recipe"] not in RECIPES:
            raise SpecError(f"unknown recipe {p['recipe']!r}")
        kw.update(RECIPES[p["recipe"]])
    kw.update({k: v for k, v in p.items() if k in _TRAIN_KEYS})
    kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc


def _arch_kw(p: dict) -> dict:
    kw = {k: p[k] for k in _ARCH_KEYS if k in p}
    try:
        Architecture(1, **kw)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc
    return kw


def _walk_config_from(p: dict, seed) -> WalkConfig:
    kw = {k: p[k] for k in WalkConfig.__dataclass_fields__ if k in p}
    kw["seed"] = seed
    try:
        return WalkConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc


def _synthetic_config_from(p: dict, seed) -> SyntheticConfig:
    kw = {k: p[k] for k in SyntheticConfig.__dataclass_fields__ if k in p}
    kw["seed"] = seed
    try:
        return SyntheticConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise SpecError(str(exc)) from exc


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_experiment(spec: ExperimentSpec) -> dict:
    """Validate, run and write artifacts into ``spec.output_path`` (a directory).

    Returns a map of artifact name to path. Nothing is written if validation
    fails; artifacts written before a failure are removed.
    """
    spec.validate()
    out = Path(spec.output_path)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    cfg = spec.resolved()
    p = spec.params
    workers = int(p.get("workers", 1))

    def emit(name, text):
        path = out / name
        atomic_write(path, text)
        written.append(path)

    try:
        emit("config.json", _json(cfg))
        if spec.kind == "gen_data":
            from .data import save_dataset

            syn = _synthetic_config_from(p, spec.seed)
            tr, te = gen_synthetic(syn)
            for ds, name in ((tr, "train.csv"), (te, "test.csv")):
                fd, tmp = tempfile.mkstemp(dir=out, suffix=".csv")
                os.close(fd)
                save_dataset(ds, tmp)
                for src, dst in ((tmp, out / name), (Path(tmp).with_suffix(".json"), (out / name).with_suffix(".json"))):
                    os.replace(src, dst)
                    written.append(Path(dst))
        elif spec.kind == "train":
            from .data import load_dataset

            tr = load_dataset(p["dataset"])
            te = load_dataset(p["test"]) if p.get("test") else None
            tcfg = _train_config_from(p, spec.seed)
            arch = Architecture(tr.X.shape[1], **_arch_kw(p))
            res = train(arch, tr, tcfg, te, workers=workers)
            emit("metrics.csv", res.metrics_csv(provenance_line(cfg)))
            fd, tmp = tempfile.mkstemp(dir=out, suffix=".json")
            os.close(fd)
            save_params(res.params, tmp)
            os.replace(tmp, out / "model.json")
            written.append(out / "model.json")
        elif spec.kind == "suppress":
            rows = run_suppression(int(p.get("n", 3000)), tuple(p.get("d_list", (4, 8, 16, 32, 64, 128, 256, 512))),
                                   p.get("t_rule", "0.8"), int(p.get("trials", 100)), spec.seed)
            emit("suppression.csv", rows_to_csv(rows, cfg))
        elif spec.kind == "correlate":
            ccfg = CorrelationConfig(**{k: p[k] for k in CorrelationConfig.__dataclass_fields__ if k in p})
            seeds = [spec.seed + i for i in range(int(p.get("num_seeds", 10)))]
            rows = run_correlation(ccfg, tuple(p.get("tau_grid", (0.0, 0.2, 0.4, 0.6, 0.8, 1.0))), seeds, workers)
            emit("correlation.csv", rows_to_csv(rows, cfg))
        elif spec.kind == "consistency":
            from .data import load_dataset

            params = load_params(p["model"])
            ds = load_dataset(p["dataset"])
            losses = network_env_losses(params, ds, p.get("max_per_env"))
            rep = inconsistency_score(params.values, losses, _walk_config_from(p, spec.seed),
                                      p.get("discrepancy", "anchored"), workers)
            emit("consistency.json", rep.to_json() + "\n")
        elif spec.kind == "env_sweep":
            rows = run_env_sweep(tuple(p.get("D_list", (16, 32, 64))), tuple(p.get("recipes", ("and_mask", "baseline"))),
                                 [spec.seed + i for i in range(int(p.get("num_seeds", 5)))],
                                 per_env=int(p.get("per_env", 256)), epochs=p.get("epochs"),
                                 data_seed=spec.seed, early_stop=bool(p.get("early_stop", False)),
                                 workers=workers)
            emit("env_sweep.csv", rows_to_csv(rows, cfg))
        elif spec.kind == "label_noise":
            rows = run_label_noise(float(p.get("fraction", 0.25)), tuple(p.get("recipes", ("and_mask", "baseline"))),
                                   [spec.seed + i for i in range(int(p.get("num_seeds", 1)))],
                                   num_envs=int(p.get("num_envs", 32)), per_env=int(p.get("per_env", 256)),
                                   epochs=p.get("epochs"), data_seed=spec.seed,
                                   early_stop=bool(p.get("early_stop", False)), workers=workers)
            emit("label_noise.csv", rows_to_csv(rows, cfg))
        elif spec.kind == "patchwork":
            wcfg = None
            if spec.seed is not None:
                wcfg = WalkConfig(epsilon=float(p.get("epsilon", 0.01)), num_steps=int(p.get("num_steps", 20000)),
                                  seed=spec.seed)
            emit("patchwork.json", _json(patchwork_demo(int(p.get("grid", 1000)), wcfg)))
    except BaseException:
        for path in written:
            if path.exists():
                path.unlink()
        raise
    return {path.name: str(path) for path in written}
