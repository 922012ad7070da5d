import math

import numpy as np
import pytest

from bqfl import classical
from bqfl.classical import MlpParams
from bqfl.errors import ArgumentError, DimensionError
from bqfl.fed import AdamState, adam_step


def _batch(rng, b=6, d=16, c=4):
    x = rng.uniform(size=(b, d))
    y = np.eye(c)[rng.integers(0, c, size=b)]
    return x, y


def test_init_mlp_shapes_and_bounds(rng):
    params = classical.init_mlp(16, 8, 4, rng)
    assert (params.input_dim, params.hidden, params.n_classes) == (16, 8, 4)
    assert np.abs(params.w1).max() <= 1 / np.sqrt(16)
    assert np.abs(params.w2).max() <= 1 / np.sqrt(8)


def test_inconsistent_shapes_raise():
    with pytest.raises(DimensionError):
        MlpParams(np.zeros((4, 3)), np.zeros(2), np.zeros((3, 2)), np.zeros(2))


def test_forward_gives_distributions(rng):
    params = classical.init_mlp(16, 8, 4, rng)
    x, _ = _batch(rng)
    p = classical.mlp_forward(params, x)
    assert p.shape == (6, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    single = classical.mlp_forward(params, x[0])
    np.testing.assert_allclose(single, p[0])


def test_forward_rejects_wrong_input_length(rng):
    params = classical.init_mlp(16, 8, 4, rng)
    with pytest.raises(DimensionError):
        classical.mlp_forward(params, np.zeros(15))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = classical.init_mlp(16, 8, 4, rng)
    x, y = _batch(rng)
    loss, grad = classical.mlp_loss_and_grad(params, x, y)
    assert loss == pytest.approx(classical.mlp_loss(params, x, y))
    for a, b in zip(grad.leaves(), classical.mlp_grad(params, x, y).leaves()):
        np.testing.assert_array_equal(a, b)
    h = 1e-5
    for leaf_index, (leaf, g) in enumerate(zip(params.leaves(), grad.leaves())):
        numeric = np.zeros_like(leaf)
        for idx in np.ndindex(leaf.shape):
            plus = [a.copy() for a in params.leaves()]
            minus = [a.copy() for a in params.leaves()]
            plus[leaf_index][idx] += h
            minus[leaf_index][idx] -= h
            numeric[idx] = (classical.mlp_loss(MlpParams(*plus), x, y) - classical.mlp_loss(MlpParams(*minus), x, y)) / (2 * h)
        rel = np.max(np.abs(g - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
        assert rel < 1e-6


def test_duplicate_hidden_units_get_identical_gradients(rng):
    base = classical.init_mlp(16, 3, 4, rng)
    w1, b1, w2 = base.w1.copy(), base.b1.copy(), base.w2.copy()
    w1[:, 1], b1[1], w2[1] = w1[:, 0], b1[0], w2[0]
    x, y = _batch(rng)
    grad = classical.mlp_grad(MlpParams(w1, b1, w2, base.b2), x, y)
    np.testing.assert_allclose(grad.w1[:, 1], grad.w1[:, 0], rtol=1e-12, atol=1e-15)
    assert grad.b1[1] == pytest.approx(grad.b1[0], rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(grad.w2[1], grad.w2[0], rtol=1e-12, atol=1e-15)


def test_single_hidden_unit_forward_by_hand():
    params = MlpParams(np.array([[0.5], [-1.0]]), np.array([0.25]), np.array([[2.0, -1.0]]), np.array([0.0, 0.5]))
    h = math.tanh(0.5 * 1.0 - 1.0 * 0.5 + 0.25)
    p0 = 1.0 / (1.0 + math.exp((-h + 0.5) - 2.0 * h))
    np.testing.assert_allclose(classical.mlp_forward(params, [1.0, 0.5]), [p0, 1.0 - p0], rtol=1e-12)


def test_ten_adam_steps_separate_a_toy_set():
    rng = np.random.default_rng(3)
    labels = np.repeat([0, 1], 10)
    centers = np.where(labels[:, None] == 0, -1.0, 1.0)
    x = centers + rng.normal(scale=0.1, size=(20, 2))
    y = np.eye(2)[labels]
    params = classical.init_mlp(2, 8, 2, rng)
    state = AdamState.zeros(params)
    for _ in range(10):
        params, state = adam_step(params, classical.mlp_grad(params, x, y).leaves(), state, 0.1)
    assert classical.mlp_accuracy(params, x, y) == 1.0


def test_zero_weights_give_uniform_prediction_and_log_c_loss(rng):
    params = classical.zeros_like_mlp(classical.init_mlp(16, 8, 4, rng))
    x, y = _batch(rng)
    assert classical.mlp_loss(params, x, y) == pytest.approx(np.log(4))
    np.testing.assert_allclose(classical.mlp_forward(params, x), 0.25)


def test_accuracy_and_empty_batch(rng):
    params = classical.init_mlp(16, 8, 4, rng)
    x, y = _batch(rng)
    assert 0.0 <= classical.mlp_accuracy(params, x, y) <= 1.0
    with pytest.raises(ArgumentError):
        classical.mlp_loss(params, np.zeros((0, 16)), np.zeros((0, 4)))
