import math

import numpy as np
import pytest

from andmask.data import SyntheticConfig, gen_synthetic
from andmask.model import Architecture, init_params
from andmask.optim import (
    METRIC_COLUMNS,
    AdamState,
    TrainConfig,
    adam_step,
    gd_step,
    metrics_to_csv,
    temporal_and_adam_step,
    train,
)


def scalar_adam(grads, alpha, b1=0.9, b2=0.999, eps=1e-16, theta=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= alpha * (m / (1 - b1**t)) / math.sqrt(v / (1 - b2**t) + eps)
    return theta


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(25, 4))
    state = AdamState.zeros(4, alpha=0.01)
    theta = np.zeros(4)
    for g in G:
        state, theta = adam_step(state, theta, g)
    want = [scalar_adam(G[:, j], 0.01) for j in range(4)]
    assert np.allclose(theta, want, rtol=1e-12, atol=1e-15)
    assert state.step_count == 25


def test_first_adam_step_is_alpha_times_sign():
    state, theta = adam_step(AdamState.zeros(3, alpha=0.1), np.zeros(3), np.array([5.0, -0.01, 0.0]))
    assert np.allclose(theta, [-0.1, 0.1, 0.0])


def test_temporal_gate_hand_computed():
    state = AdamState.zeros(2, alpha=0.1, beta3=0.5, tau=0.7)
    theta = np.zeros(2)
    # a after k steps of constant sign s is s * (1 - 0.5**k): 0.5, 0.75, ...
    state, theta = temporal_and_adam_step(state, theta, np.array([1.0, 1.0]))
    assert np.allclose(state.a, [0.5, 0.5]) and np.all(theta == 0)
    state, theta = temporal_and_adam_step(state, theta, np.array([1.0, -1.0]))
    assert np.allclose(state.a, [0.75, -0.25])
    assert theta[0] == pytest.approx(-0.1) and theta[1] == 0
    # moments kept absorbing the gated-out component
    assert state.m[1] != 0


def test_temporal_weight_decay_is_separate():
    state = AdamState.zeros(1, alpha=0.1, tau=1.0, weight_decay=0.5)
    state, theta = temporal_and_adam_step(state, np.array([2.0]), np.array([1.0]))
    assert theta[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_step_validation():
    with pytest.raises(FloatingPointError):
        gd_step(np.zeros(2), np.array([np.nan, 0]), 0.1)
    with pytest.raises(ValueError):
        gd_step(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        AdamState.zeros(2, beta1=1.0)
    assert np.allclose(gd_step(np.ones(2), np.array([1.0, -2.0]), 0.5), [0.5, 2.0])


def test_train_config_validation_and_schedule():
    cfg = TrainConfig(epochs=8, learning_rate=1.0)
    assert cfg.schedule() == [(4, 0.1), (6, 0.1)]
    assert [cfg.lr_at(e) for e in (0, 3, 4, 5, 6, 7)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])
    for bad in (dict(optimizer="sgd"), dict(mask_rule="median"), dict(tau=2.0), dict(epochs=0),
                dict(learning_rate=-1.0), dict(mask_rule="and", batching="pooled"),
                dict(optimizer="temporal_adam", mask_rule="and"), dict(dropout_rate=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def small():
    tr, te = gen_synthetic(SyntheticConfig(num_envs=4, per_env=40, test_size=60, seed=2))
    return tr, te, Architecture(34, 2, 16)


def test_tau_zero_and_mask_equals_plain_averaging(small):
    tr, te, arch = small
    kw = dict(batch_size=16, epochs=3, seed=4, batching="env")
    a = train(arch, tr, TrainConfig(mask_rule="and", tau=0.0, rescale=True, **kw), te)
    b = train(arch, tr, TrainConfig(mask_rule="none", **kw), te)
    assert a.params.values.tobytes() == b.params.values.tobytes()
    assert [{k: v for k, v in r.items() if k != "mask_keep_frac"} for r in a.metrics] == \
           [{k: v for k, v in r.items() if k != "mask_keep_frac"} for r in b.metrics]


def test_train_is_seed_deterministic_and_logs_every_epoch(small):
    tr, te, arch = small
    cfg = TrainConfig(mask_rule="and", tau=0.5, rescale=True, batch_size=16, epochs=3, seed=1, l2_coeff=1e-4)
    a, b = train(arch, tr, cfg, te), train(arch, tr, cfg, te)
    assert a.metrics_csv("p") == b.metrics_csv("p")
    assert [r["epoch"] for r in a.metrics] == [1, 2, 3]
    assert set(METRIC_COLUMNS) <= set(a.metrics[0])
    assert all(0 <= r["mask_keep_frac"] <= 1 for r in a.metrics)
    c = train(arch, tr, TrainConfig(**{**cfg.__dict__, "seed": 2}), te)
    assert c.metrics_csv("p") != a.metrics_csv("p")


@pytest.mark.parametrize("kw", [
    dict(optimizer="gd", momentum=0.9),
    dict(optimizer="temporal_adam"),
    dict(mask_rule="geometric"),
    dict(mask_rule="xor", tau=0.5),
    dict(dropout_rate=0.3, l1_coeff=1e-4),
])
def test_train_variants_run(small, kw):
    tr, te, arch = small
    res = train(arch, tr, TrainConfig(batch_size=16, epochs=2, seed=0, **kw), te)
    assert len(res.metrics) == 2
    assert np.all(np.isfinite(res.params.values))


def test_baseline_fits_training_set(small):
    tr, te, arch = small
    res = train(arch, tr, TrainConfig(batch_size=16, epochs=30, seed=0), te)
    assert res.metrics[-1]["train_acc"] > 0.95


def test_early_stop_fires(small):
    tr, te, arch = small
    res = train(arch, tr, TrainConfig(batch_size=16, epochs=60, seed=0, early_stop=True), te)
    assert res.stopped_early
    last = res.metrics[-1]
    assert last["train_acc"] > 0.97 and last["test_acc"] < 0.6 and len(res.metrics) < 60


def test_eval_sets_and_errors(small):
    tr, te, arch = small
    res = train(arch, tr, TrainConfig(epochs=1, seed=0), te, eval_sets={"few": (tr.X[:5], tr.y[:5])})
    assert "few_acc" in res.metrics[0]
    with pytest.raises(ValueError):
        train(Architecture(3), tr, TrainConfig(epochs=1), te)
    with pytest.raises(ValueError):
        train(arch, tr.subset([]), TrainConfig(epochs=1), te)
    p = init_params(arch, 0)
    assert train(p, tr, TrainConfig(epochs=1, seed=0), te).params.n == p.n


def test_metrics_csv_format():
    text = metrics_to_csv([{"epoch": 1, "train_acc": 0.1, "test_acc": 1 / 3, "train_loss": 2.0,
                            "mask_keep_frac": 1.0}], "cfg=abc")
    lines = text.splitlines()
    assert lines[0] == "# cfg=abc"
    assert lines[1] == ",".join(METRIC_COLUMNS)
    assert lines[2].split(",")[2] == format(1 / 3, ".17g")
