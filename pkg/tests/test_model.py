import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbucket.errors import InputError, TrainingDivergedError
from fedbucket.model import (
    LayerSpec, LocalTrainConfig, ModelSpec, Parameters, Update, apply_update, compute_update,
    evaluate, init_model, local_train, loss_and_grad, predict, sgd_step)


def _batch(spec, n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.class_count, n)
    return x, y


def _loss_from_flat(spec, flat, x, y):
    # independent forward pass in plain numpy
    h = x
    offset = 0
    for ls in spec.layers:
        k = ls.fan_in * ls.fan_out
        w = flat[offset:offset + k].reshape(ls.fan_in, ls.fan_out)
        b = flat[offset + k:offset + k + ls.fan_out]
        offset += k + ls.fan_out
        z = h @ w + b
        h = np.maximum(z, 0) if ls.activation == "relu" else z
    z = h - h.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return -np.log(p[np.arange(len(y)), y]).mean()


def test_spec_dims():
    spec = ModelSpec.mlp([784, 64, 48, 18, 12, 10])
    assert spec.layer_dims == (50240, 3120, 882, 228, 130)
    assert spec.total_dim == 54600
    assert spec.input_dim == 784 and spec.class_count == 10
    assert spec.widths == (784, 64, 48, 18, 12, 10)


def test_spec_rejects_broken_chain():
    with pytest.raises(InputError):
        ModelSpec((LayerSpec(4, 3, "relu"), LayerSpec(5, 2, "softmax")))
    with pytest.raises(InputError):
        ModelSpec((LayerSpec(4, 3, "relu"),))


def test_init_is_glorot_with_zero_bias(small_spec):
    p = init_model(small_spec, 3)
    for i, ls in enumerate(small_spec.layers):
        w, b = p.weights(i)
        assert w.shape == (ls.fan_in, ls.fan_out)
        assert np.abs(w).max() <= np.sqrt(6 / (ls.fan_in + ls.fan_out))
        assert not b.any()
    assert p.same_as(init_model(small_spec, 3))
    assert not p.same_as(init_model(small_spec, 4))


def test_parameters_are_read_only(small_spec):
    p = init_model(small_spec, 0)
    with pytest.raises(ValueError):
        p.per_layer[0][0] = 1.0


def test_gradient_matches_finite_differences(small_spec):
    p = init_model(small_spec, 1)
    x, y = _batch(small_spec, seed=1)
    _, grad = loss_and_grad(p, x, y)
    flat = p.flat().astype(np.float64)
    eps = 1e-6
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        numeric[i] = (_loss_from_flat(small_spec, up, x, y) - _loss_from_flat(small_spec, dn, x, y)) / (2 * eps)
    np.testing.assert_allclose(grad.flat(), numeric, rtol=1e-3, atol=1e-5)


def test_loss_matches_independent_forward(small_spec):
    p = init_model(small_spec, 2)
    x, y = _batch(small_spec, seed=2)
    loss, _ = loss_and_grad(p, x, y)
    assert loss == pytest.approx(_loss_from_flat(small_spec, p.flat().astype(np.float64), x, y), rel=1e-12)


def test_single_step_by_hand():
    # one softmax layer, 2 inputs, 2 classes, all-zero weights: p = (1/2, 1/2)
    spec = ModelSpec.mlp([2, 2])
    p = Parameters(spec, (np.zeros(6, np.float32),))
    x = np.array([[1.0, 2.0]])
    y = np.array([0])
    loss, grad = loss_and_grad(p, x, y)
    assert loss == pytest.approx(np.log(2))
    # dL/dz = p - onehot = (-1/2, 1/2); dW = x^T dz; db = dz
    np.testing.assert_allclose(grad.flat(), [-0.5, 0.5, -1.0, 1.0, -0.5, 0.5])
    stepped = sgd_step(p, grad, 0.1)
    np.testing.assert_allclose(stepped.flat(), [0.05, -0.05, 0.1, -0.1, 0.05, -0.05], rtol=1e-6)


def test_local_training_lowers_loss():
    spec = ModelSpec.mlp([4, 8, 2])
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.standard_normal((200, 4)) * 0.3 + y[:, None] * 1.5
    history = []
    p = local_train(init_model(spec, 0), x, y, LocalTrainConfig(epochs=5, learning_rate=0.1), history)
    assert all(b < a for a, b in zip(history, history[1:]))
    assert evaluate(p, x, y)[1] > 0.95


def test_zero_learning_rate_is_identity(small_spec):
    p = init_model(small_spec, 0)
    x, y = _batch(small_spec)
    assert local_train(p, x, y, LocalTrainConfig(learning_rate=0.0)) is p


def test_local_training_is_seeded(small_spec):
    p = init_model(small_spec, 0)
    x, y = _batch(small_spec, n=25)
    a = local_train(p, x, y, LocalTrainConfig(seed=5))
    b = local_train(p, x, y, LocalTrainConfig(seed=5))
    c = local_train(p, x, y, LocalTrainConfig(seed=6))
    assert a.same_as(b) and not a.same_as(c)


def test_last_partial_batch_is_used(small_spec):
    # with batch 3 over 4 samples and one epoch there are two steps, the second on one sample
    p = init_model(small_spec, 0)
    x, y = _batch(small_spec, n=4)
    cfg = LocalTrainConfig(epochs=1, learning_rate=0.1, batch_size=3, seed=9)
    order = np.random.default_rng(9).permutation(4)
    manual = p
    for idx in (order[:3], order[3:]):
        manual = sgd_step(manual, loss_and_grad(manual, x[idx], y[idx])[1], 0.1)
    assert local_train(p, x, y, cfg).same_as(manual)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_spec):
    p = init_model(small_spec, 0)
    x, y = _batch(small_spec, n=20)
    with pytest.raises(TrainingDivergedError):
        local_train(p, x * 1e30, y, LocalTrainConfig(learning_rate=1e10))


def test_bad_batches_rejected(small_spec):
    p = init_model(small_spec, 0)
    with pytest.raises(InputError):
        loss_and_grad(p, np.zeros((3, 5)), np.zeros(3, int))
    with pytest.raises(InputError):
        loss_and_grad(p, np.zeros((3, 6)), np.array([0, 1, 3]))
    with pytest.raises(InputError):
        local_train(p, np.zeros((0, 6)), np.zeros(0, int), LocalTrainConfig())


def test_update_round_trip(small_spec):
    a, b = init_model(small_spec, 0), init_model(small_spec, 1)
    u = compute_update(b, a)
    np.testing.assert_allclose(apply_update(a, u).flat(), b.flat(), rtol=0, atol=1e-6)
    assert apply_update(a, Update.zeros(small_spec)).same_as(a)
    other = init_model(ModelSpec.mlp([6, 4, 3]), 0)
    with pytest.raises(InputError):
        compute_update(other, a)


def test_predict_and_evaluate_agree(small_spec):
    p = init_model(small_spec, 0)
    x, y = _batch(small_spec, n=30)
    acc = evaluate(p, x, y)[1]
    assert acc == pytest.approx((predict(p, x) == y).mean())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_sgd_step_moves_against_gradient(seed, lr):
    spec = ModelSpec.mlp([3, 4, 2])
    p = init_model(spec, seed)
    x, y = _batch(spec, seed=seed)
    _, g = loss_and_grad(p, x, y)
    moved = sgd_step(p, g, lr).flat().astype(np.float64) - p.flat()
    np.testing.assert_allclose(moved, -lr * g.flat(), rtol=1e-4, atol=1e-6)
