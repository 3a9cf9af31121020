import math

import numpy as np
import pytest

from dpconformal.models import (Dataset, ModelSpec, batch_loss_and_grads,
                                init_params, loss_and_grad, param_count,
                                predict_proba, predict_value)

RNG = np.random.default_rng(20260810)


def central_difference_grad(spec, params, example, h=1e-5):
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        up[i] += h
        down = params.copy()
        down[i] -= h
        grad[i] = (loss_and_grad(spec, up, example)[0]
                   - loss_and_grad(spec, down, example)[0]) / (2 * h)
    return grad


def test_param_counts():
    assert param_count(ModelSpec("linear_regression", 7)) == 7
    assert param_count(ModelSpec("softmax_linear", 7, 3)) == 21
    assert param_count(ModelSpec("mlp", 10, 5, (16, 16))) == (
        10 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5)


def test_linear_regression_at_zero_params():
    spec = ModelSpec("linear_regression", 4)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    y = 2.5
    loss, grad = loss_and_grad(spec, np.zeros(4), (x, y))
    assert loss == pytest.approx(y * y / 2)
    np.testing.assert_allclose(grad, -y * x)


def test_softmax_at_zero_params_is_uniform():
    spec = ModelSpec("softmax_linear", 6, 2)
    x = RNG.standard_normal(6)
    loss, _ = loss_and_grad(spec, np.zeros(12), (x, 1))
    assert loss == pytest.approx(math.log(2))
    probs = predict_proba(spec, np.zeros(12), x[None, :])[0]
    np.testing.assert_allclose(probs, 0.5)


@pytest.mark.parametrize("spec,label_kind", [
    (ModelSpec("linear_regression", 6), "real"),
    (ModelSpec("softmax_linear", 6, 4), "class"),
    (ModelSpec("mlp", 6, 3, (16, 16)), "class"),
    (ModelSpec("mlp", 6, 1, (8, 4)), "real"),
])
def test_gradients_match_central_differences(spec, label_kind):
    for _ in range(20):
        params = RNG.standard_normal(param_count(spec)) * 0.5
        x = RNG.standard_normal(spec.input_dim)
        y = RNG.standard_normal() if label_kind == "real" else int(
            RNG.integers(spec.output_dim))
        _, grad = loss_and_grad(spec, params, (x, y))
        fd = central_difference_grad(spec, params, (x, y))
        denom = max(np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(grad - fd) / denom < 1e-5


def test_batched_grads_match_per_example_loop():
    spec = ModelSpec("mlp", 5, 3, (8,))
    params = RNG.standard_normal(param_count(spec)) * 0.3
    x = RNG.standard_normal((9, 5))
    y = RNG.integers(3, size=9)
    losses, grads = batch_loss_and_grads(spec, params, x, y)
    for i in range(9):
        li, gi = loss_and_grad(spec, params, (x[i], y[i]))
        assert losses[i] == pytest.approx(li, rel=1e-12)
        np.testing.assert_allclose(grads[i], gi, rtol=1e-12)


def test_init_params():
    rng1 = np.random.default_rng(3)
    rng2 = np.random.default_rng(3)
    spec = ModelSpec("mlp", 4, 2, (8,))
    a = init_params(spec, rng1)
    b = init_params(spec, rng2)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a[:32]).max() <= 1 / math.sqrt(4)
    assert np.all(init_params(ModelSpec("softmax_linear", 4, 3), rng1) == 0.0)


def test_dimension_mismatch_errors():
    spec = ModelSpec("softmax_linear", 4, 3)
    with pytest.raises(ValueError):
        loss_and_grad(spec, np.zeros(5), (np.zeros(4), 0))
    with pytest.raises(ValueError):
        predict_proba(spec, np.zeros(12), np.zeros((2, 9)))
    with pytest.raises(ValueError):
        predict_value(spec, np.zeros(12), np.zeros((2, 4)))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), np.zeros(0), "classification")
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 5]), "classification",
                n_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2), "regression")
    data = Dataset(np.zeros((4, 2)), np.array([0, 1, 2, 1]), "classification")
    assert data.n_classes == 3 and data.n == 4 and data.dim == 2
