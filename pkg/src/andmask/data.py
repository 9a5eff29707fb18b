"""Synthetic memorization task: shared spiral mechanism plus per-environment shortcuts.

Each example carries a 2-d spiral point (the mechanism, identical in every
environment) followed by a ``d_S``-dimensional shortcut block. In training
environment ``e`` the shortcut block is exactly ``+x_e`` for class 1 and
``-x_e`` for class 0; in the test split it is fresh Gaussian noise, so only
the spiral carries over.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

MECHANISM_DIM = 2


@dataclass(frozen=True)
class SyntheticConfig:
    num_envs: int = 32
    per_env: int = 1280
    d_S: int = 32
    d_M: int = MECHANISM_DIM
    spiral_revolutions: int = 3
    radius_min: float = 0.08
    radius_max: float = 1.0
    radius_noise: float = 0.02
    shortcut_sigma: float = 0.1
    test_size: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.d_M != MECHANISM_DIM:
            raise ValueError("the spiral mechanism is planar: d_M must be 2")
        if self.d_S < 0:
            raise ValueError("d_S must be >= 0")
        if self.num_envs < 1 or self.per_env < 1 or self.test_size < 0:
            raise ValueError("num_envs and per_env must be positive, test_size nonnegative")
        if not 0 < self.radius_min < self.radius_max:
            raise ValueError("need 0 < radius_min < radius_max")
        if self.radius_noise < 0 or self.shortcut_sigma < 0:
            raise ValueError("noise scales must be nonnegative")

    @property
    def input_dim(self) -> int:
        return self.d_M + self.d_S


@dataclass
class EnvDataset:
    X: np.ndarray
    y: np.ndarray
    env: np.ndarray
    split: str = "train"
    shortcut_vectors: Optional[np.ndarray] = None
    d_M: int = MECHANISM_DIM
    config: Optional[SyntheticConfig] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        self.env = np.asarray(self.env, dtype=np.intp)
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.y) != len(self.env):
            raise ValueError("X, y and env must have matching lengths")
        if self.split not in ("train", "test"):
            raise ValueError("split is 'train' or 'test'")

    def __len__(self):
        return len(self.y)

    @property
    def mechanism(self) -> np.ndarray:
        return self.X[:, : self.d_M]

    @property
    def shortcut(self) -> np.ndarray:
        return self.X[:, self.d_M:]

    @property
    def env_ids(self) -> np.ndarray:
        return np.unique(self.env)

    def env_indices(self) -> dict:
        return {int(e): np.flatnonzero(self.env == e) for e in self.env_ids}

    def subset(self, idx) -> "EnvDataset":
        return replace(self, X=self.X[idx], y=self.y[idx], env=self.env[idx])


def spiral_points(r: np.ndarray, labels: np.ndarray, revolutions: int, r_noisy=None) -> np.ndarray:
    """Class 1 on the arm at angle ``2*pi*revolutions*r``; class 0 is its point reflection."""
    alpha = 2 * np.pi * revolutions * r
    rr = r if r_noisy is None else r_noisy
    pts = np.stack([rr * np.cos(alpha), rr * np.sin(alpha)], axis=1)
    return np.where(labels[:, None] == 1, pts, -pts)


def _mechanism(rng, n, cfg):
    y = rng.integers(0, 2, size=n)
    r = rng.uniform(cfg.radius_min, cfg.radius_max, size=n)
    noise = rng.uniform(-cfg.radius_noise, cfg.radius_noise, size=n)
    return y, spiral_points(r, y, cfg.spiral_revolutions, r + noise)


def gen_synthetic(cfg: SyntheticConfig) -> tuple[EnvDataset, EnvDataset]:
    """Generate ``(train, test)``. Pure function of ``cfg`` (seed included)."""
    rng = np.random.default_rng(cfg.seed)
    shortcuts = rng.normal(0.0, cfg.shortcut_sigma, size=(cfg.num_envs, cfg.d_S))

    xs, ys, envs = [], [], []
    for e in range(cfg.num_envs):
        y, mech = _mechanism(rng, cfg.per_env, cfg)
        sign = np.where(y == 1, 1.0, -1.0)[:, None]
        xs.append(np.hstack([mech, sign * shortcuts[e]]))
        ys.append(y)
        envs.append(np.full(cfg.per_env, e))
    train = EnvDataset(
        np.vstack(xs), np.concatenate(ys), np.concatenate(envs), "train", shortcuts, config=cfg
    )

    y, mech = _mechanism(rng, cfg.test_size, cfg)
    noise = rng.normal(0.0, cfg.shortcut_sigma, size=(cfg.test_size, cfg.d_S))
    test = EnvDataset(
        np.hstack([mech, noise]), y, np.full(cfg.test_size, -1), "test", None, config=cfg
    )
    return train, test


def _require_train(ds: EnvDataset):
    if ds.split != "train":
        raise ValueError("interventions apply to the training split only")


def permute_mechanism(ds: EnvDataset, seed: int) -> EnvDataset:
    """Shuffle mechanism rows across examples; labels and shortcuts stay put."""
    _require_train(ds)
    perm = np.random.default_rng(seed).permutation(len(ds))
    X = ds.X.copy()
    X[:, : ds.d_M] = ds.X[perm, : ds.d_M]
    return replace(ds, X=X)


def permute_shortcut(ds: EnvDataset, seed: int) -> EnvDataset:
    """Shuffle shortcut rows across examples; labels and mechanism stay put."""
    _require_train(ds)
    perm = np.random.default_rng(seed).permutation(len(ds))
    X = ds.X.copy()
    X[:, ds.d_M:] = ds.X[perm, ds.d_M:]
    return replace(ds, X=X)


def shuffle_labels(ds: EnvDataset, fraction: float, seed: int, mode: str = "resample", num_classes: int = 2):
    """Corrupt ``round(fraction * N)`` labels; returns ``(dataset, sorted indices)``.

    ``mode="resample"`` draws the new label uniformly from all classes, so
    some picks land on the original label. ``mode="flip"`` draws uniformly
    from the other classes, so every chosen label is wrong.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if mode not in ("resample", "flip"):
        raise ValueError("mode is 'resample' or 'flip'")
    rng = np.random.default_rng(seed)
    n = len(ds)
    k = int(round(fraction * n))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    y = ds.y.copy()
    if mode == "resample":
        y[idx] = rng.integers(0, num_classes, size=k)
    else:
        y[idx] = (y[idx] + rng.integers(1, num_classes, size=k)) % num_classes
    return replace(ds, y=y), idx


def nearest_arm_predict(mech: np.ndarray, revolutions: int = 3) -> np.ndarray:
    """Reference classifier for the spiral block: pick the arm with the smaller angular gap."""
    r = np.hypot(mech[:, 0], mech[:, 1])
    phi = np.arctan2(mech[:, 1], mech[:, 0])
    gap1 = np.angle(np.exp(1j * (phi - 2 * np.pi * revolutions * r)))
    return (np.abs(gap1) < np.pi / 2).astype(np.intp)


def save_dataset(ds: EnvDataset, path) -> None:
    """CSV ``env,label,f0..`` at 17 significant digits plus a ``.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "label"] + [f"f{i}" for i in range(ds.X.shape[1])])
        for e, lab, row in zip(ds.env, ds.y, ds.X):
            w.writerow([int(e), int(lab)] + [format(v, ".17g") for v in row])
    meta = {
        "split": ds.split,
        "d_M": ds.d_M,
        "config": asdict(ds.config) if ds.config is not None else None,
        "shortcut_vectors": None if ds.shortcut_vectors is None
        else [[format(v, ".17g") for v in row] for row in ds.shortcut_vectors],
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(path) -> EnvDataset:
    path = Path(path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    sv = meta.get("shortcut_vectors")
    cfg = meta.get("config")
    return EnvDataset(
        raw[:, 2:],
        raw[:, 1].astype(np.intp),
        raw[:, 0].astype(np.intp),
        meta.get("split", "train"),
        None if sv is None else np.array(sv, dtype=np.float64),
        meta.get("d_M", MECHANISM_DIM),
        config=None if cfg is None else SyntheticConfig(**cfg),
    )
