import math

import numpy as np
import pytest

from andmask.model import (
    Architecture,
    GradientBatch,
    LossConfig,
    ParamVector,
    dropout_masks,
    env_gradients,
    fd_hessian_diag,
    forward,
    hessian_diag,
    init_params,
    load_params,
    loss,
    loss_and_grad,
    make_layout,
    save_params,
    unpack,
)


def naive_forward(theta, arch, x):
    """Scalar-loop oracle for one example."""
    h = list(x)
    off = 0
    shapes = arch.layer_shapes()
    for k, (fi, fo) in enumerate(shapes):
        W = theta[off:off + fi * fo]
        off += fi * fo
        b = theta[off:off + fo]
        off += fo
        z = [sum(h[i] * W[i * fo + j] for i in range(fi)) + b[j] for j in range(fo)]
        if k < len(shapes) - 1:
            z = [v if v > 0 else arch.activation_slope * v for v in z]
        h = z
    return h


def test_param_count_and_layout():
    arch = Architecture(34, 3, 256)
    assert arch.num_params == 34 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 2 + 2
    layout = make_layout(arch)
    assert [s.layer_id for s in layout] == ["W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3"]
    assert sum(s.length for s in layout) == arch.num_params


def test_forward_matches_scalar_oracle():
    arch = Architecture(4, 2, 5, activation_slope=0.1, output_classes=3)
    rng = np.random.default_rng(0)
    p = ParamVector(rng.normal(size=arch.num_params), arch)
    X = rng.normal(size=(6, 4))
    got = forward(p, X)
    want = np.array([naive_forward(p.values, arch, x) for x in X])
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_init_is_deterministic_and_scaled():
    arch = Architecture(400, 1, 300)
    a, b = init_params(arch, 7), init_params(arch, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, init_params(arch, 8).values)
    (W0, b0), (W1, b1) = unpack(a.values, arch)
    assert np.all(b0 == 0) and np.all(b1 == 0)
    assert abs(W0.std() - 1 / math.sqrt(400)) < 0.003
    assert abs(W0.mean()) < 0.002


def test_loss_value_against_hand_computation():
    arch = Architecture(1, 0, 1)
    # logits = [w0*x + b0, w1*x + b1]
    p = ParamVector(np.array([1.0, -1.0, 0.0, 0.5]), arch)
    X = np.array([[2.0]])
    z = np.array([2.0, -1.5])
    want = -(z[1] - np.log(np.exp(z).sum()))
    assert loss(forward(p, X), [1], p) == pytest.approx(want, rel=1e-14)
    cfg = LossConfig(l1_coeff=0.1, l2_coeff=0.2)
    reg = 0.1 * 2.5 + 0.5 * 0.2 * (1 + 1 + 0.25)
    assert loss(forward(p, X), [1], p, cfg) == pytest.approx(want + reg, rel=1e-14)


def test_loss_and_grad_matches_central_differences_with_penalties():
    arch = Architecture(3, 2, 4)
    rng = np.random.default_rng(1)
    p = ParamVector(rng.normal(0, 0.5, arch.num_params), arch)
    X, y = rng.normal(size=(9, 3)), rng.integers(0, 2, 9)
    cfg = LossConfig(l1_coeff=1e-3, l2_coeff=1e-2)
    val, g = loss_and_grad(p, X, y, cfg)
    assert val == pytest.approx(loss(forward(p, X), y, p, cfg))
    h = 1e-6
    for i in range(p.n):
        e = np.zeros(p.n)
        e[i] = h
        fp = loss(forward(p.replace(p.values + e), X), y, p.replace(p.values + e), cfg)
        fm = loss(forward(p.replace(p.values - e), X), y, p.replace(p.values - e), cfg)
        assert abs((fp - fm) / (2 * h) - g[i]) < 1e-6


def test_env_gradients_rows_match_single_batches():
    arch = Architecture(3, 1, 6)
    rng = np.random.default_rng(2)
    p = init_params(arch, 0)
    batches = [(e, rng.normal(size=(n, 3)), rng.integers(0, 2, n)) for e, n in ((5, 4), (2, 7), (9, 4))]
    gb = env_gradients(p, batches)
    assert gb.env_ids == [5, 2, 9] and gb.d == 3 and gb.n == p.n
    for row, (_, X, y) in zip(gb.grads, batches):
        assert np.allclose(row, loss_and_grad(p, X, y)[1], rtol=1e-12, atol=1e-14)
    # equal sizes take the stacked path
    eq = [(e, X[:4], y[:4]) for e, X, y in batches]
    gb2 = env_gradients(p, eq, workers=2)
    for row, (_, X, y) in zip(gb2.grads, eq):
        assert np.allclose(row, loss_and_grad(p, X, y)[1], rtol=1e-12, atol=1e-14)


def test_env_gradients_errors():
    p = init_params(Architecture(2, 1, 3), 0)
    with pytest.raises(ValueError):
        env_gradients(p, [])
    with pytest.raises(ValueError):
        env_gradients(p, [(0, np.zeros((0, 2)), np.zeros(0, int))])
    with pytest.raises(ValueError):
        env_gradients(p, [(0, np.zeros((2, 3)), np.zeros(2, int))])
    with pytest.raises(ValueError):
        env_gradients(p, [(0, np.zeros((2, 2)), np.array([0, 2]))])


def test_gradient_batch_validation():
    with pytest.raises(FloatingPointError):
        GradientBatch(np.array([[1.0, np.nan]]), [0])
    with pytest.raises(ValueError):
        GradientBatch(np.ones((2, 3)), [0])
    gb = GradientBatch(np.array([[1.0, 2.0], [3.0, 4.0]]), ["a", "b"])
    assert np.array_equal(gb.mean(), [2.0, 3.0])


def test_param_vector_validation():
    arch = Architecture(2, 1, 2)
    with pytest.raises(ValueError):
        ParamVector(np.zeros(arch.num_params + 1), arch)
    with pytest.raises(ValueError):
        ParamVector(np.full(arch.num_params, np.inf), arch)
    with pytest.raises(ValueError):
        Architecture(0)
    with pytest.raises(ValueError):
        LossConfig(dropout_rate=1.0)


def test_dropout_masks_keep_rate_and_scale():
    arch = Architecture(2, 2, 1000)
    masks = dropout_masks(arch, (50,), 0.3, np.random.default_rng(0))
    assert len(masks) == 2
    vals = np.unique(masks[0])
    assert set(np.round(vals, 12)) <= {0.0, round(1 / 0.7, 12)}
    assert abs((masks[0] > 0).mean() - 0.7) < 0.01


def test_fd_hessian_diag_on_known_function():
    # f = sum(a_i x_i^2 / 2) + x0*x1 has diagonal Hessian a
    a = np.array([1.0, 3.0, 0.5])
    f = lambda x: 0.5 * a @ (x * x) + x[0] * x[1]  # noqa: E731
    assert np.allclose(fd_hessian_diag(f, np.array([0.3, -1.0, 2.0])), a, rtol=1e-6)
    with pytest.raises(ValueError):
        fd_hessian_diag(f, np.zeros(3), step=0.0)


def test_hessian_diag_of_linear_model_with_l2():
    # no hidden layers: the cross-entropy Hessian diagonal on W is x^2 p(1-p)
    arch = Architecture(1, 0, 1)
    p = ParamVector(np.array([0.2, -0.3, 0.1, 0.0]), arch)
    X, y = np.array([[1.5]]), np.array([0])
    z = forward(p, X)[0]
    q = np.exp(z) / np.exp(z).sum()
    pq = q[0] * q[1]
    want = np.array([1.5**2 * pq, 1.5**2 * pq, pq, pq]) + 0.1
    got = hessian_diag(p, (X, y), LossConfig(l2_coeff=0.1), step=1e-4)
    assert np.allclose(got, want, rtol=1e-5)
    with pytest.raises(ValueError):
        hessian_diag(p, (X, y), step=-1)


def test_save_load_roundtrip_is_exact(tmp_path):
    p = init_params(Architecture(5, 2, 7), 3)
    p = p.replace(p.values + np.random.default_rng(0).normal(size=p.n) * 1e-7)
    path = tmp_path / "m.json"
    save_params(p, path)
    q = load_params(path)
    assert q.arch == p.arch and q.layout == p.layout
    assert q.values.tobytes() == p.values.tobytes()
