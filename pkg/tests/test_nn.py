import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdrop.errors import ShapeError
from fairdrop.fairdropout import FairDropout, FairDropoutConfig
from fairdrop.nn import (
    Dense,
    Model,
    ReLU,
    build_mlp,
    dense_forward,
    finite_difference_check,
    load_model,
    model_backward,
    model_from_json,
    model_to_json,
    relu,
    save_model,
    softmax_cross_entropy,
)


def matvec_loops(W, x, b):
    return [b[j] + sum(W[j][i] * x[i] for i in range(len(x))) for j in range(len(W))]


def test_dense_identity():
    layer = Dense(np.eye(2), np.zeros(2), 0)
    assert dense_forward(np.array([1.0, 2.0]), layer).tolist() == [1.0, 2.0]


def test_dense_matches_loops():
    W, b, x = [[2.0, 1.0], [0.0, 3.0]], [1.0, -1.0], [1.0, -1.0]
    expected = matvec_loops(W, x, b)
    assert expected == [2.0, -4.0]
    out = dense_forward(np.array(x), Dense(np.array(W), np.array(b), 0))
    assert out.tolist() == expected


def test_dense_zero_input_passes_bias():
    layer = Dense(np.random.default_rng(0).normal(size=(2, 2)), np.array([5.0, -3.0]), 0)
    assert dense_forward(np.zeros(2), layer).tolist() == [5.0, -3.0]


def test_dense_shape_error_names_widths():
    layer = Dense(np.eye(2), np.zeros(2), 3)
    with pytest.raises(ShapeError, match="expected 2, got 3"):
        dense_forward(np.ones(3), layer)


def test_relu():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert not relu(-np.arange(1.0, 5.0)).any()
    x = np.arange(1.0, 5.0)
    assert np.array_equal(relu(x), x)


@pytest.mark.parametrize("logits,label,expected", [
    ([0.0, 0.0], 0, math.log(2)),
    ([2.0, 0.0], 0, 0.1269280110429726),
])
def test_cross_entropy_values(logits, label, expected):
    loss, _ = softmax_cross_entropy(np.array(logits), label)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_grad_uniform():
    _, grad = softmax_cross_entropy(np.zeros(2), 0)
    assert grad.tolist() == [-0.5, 0.5]


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), 3)


def test_cross_entropy_stable_for_large_logits():
    loss, grad = softmax_cross_entropy(np.array([1000.0, -1000.0]), 1)
    assert loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(grad))


@given(st.integers(2, 6), st.floats(-50, 50))
def test_cross_entropy_constant_logits_is_log_c(c, v):
    loss, _ = softmax_cross_entropy(np.full(c, v), 0)
    assert loss == pytest.approx(math.log(c), rel=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_cross_entropy_nonnegative(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, _ = softmax_cross_entropy(np.array(logits), label)
    assert loss >= 0.0


def test_backward_single_dense_by_hand():
    model = Model([Dense(np.zeros((2, 2)), np.zeros(2), 0)])
    g = model_backward(model, np.array([1.0, 0.0]), 0)
    assert g.weights[0].tolist() == [[-0.5, 0.0], [0.5, 0.0]]
    assert g.bias[0].tolist() == [-0.5, 0.5]


def test_backward_zero_input():
    rng = np.random.default_rng(3)
    model = Model([Dense(rng.normal(size=(3, 4)), rng.normal(size=3), 0)])
    g = model_backward(model, np.zeros(4), 2)
    _, expected = softmax_cross_entropy(model.forward(np.zeros(4)), 2)
    assert not g.weights[0].any()
    assert np.allclose(g.bias[0], expected)


def test_gradient_shapes_match_parameters():
    model = build_mlp(5, [7, 3], 4, seed=0, fair_dropout=(1, 0.5, 0.5, 1))
    g = model_backward(model, np.ones(5), 1, example_id=0)
    for layer in model.dense_layers:
        assert g.weights[layer.layer_index].shape == layer.weights.shape
        assert g.bias[layer.layer_index].shape == layer.bias.shape


def test_fd_linear_model():
    rng = np.random.default_rng(0)
    model = Model([Dense(rng.normal(size=(2, 2)), rng.normal(size=2), 0)])
    assert finite_difference_check(model, (rng.normal(size=2), 1), 1e-5) < 1e-6


def test_fd_relu_model():
    model = build_mlp(3, [5], 2, seed=4)
    x = np.array([0.7, -1.2, 0.4])
    pre = model.dense_layers[0].weights @ x + model.dense_layers[0].bias
    assert np.abs(pre).min() > 1e-3
    assert finite_difference_check(model, (x, 0), 1e-5) < 1e-4


def test_fd_zero_parameter_model():
    assert finite_difference_check(Model([]), (np.array([0.3, -0.1]), 0)) == 0.0


def test_fd_rejects_large_epsilon():
    with pytest.raises(ValueError):
        finite_difference_check(Model([]), (np.zeros(2), 0), 0.1)


def kink_free_input(model, rng, dim, margin=1e-3):
    """Draw x until every hidden pre-activation is at least ``margin`` away from 0."""
    while True:
        x = rng.normal(size=dim)
        h, ok = x, True
        for layer in model.layers:
            if isinstance(layer, Dense):
                h = layer.weights @ h + layer.bias
            elif isinstance(layer, ReLU):
                ok &= bool(np.abs(h).min() > margin)
                h = np.maximum(h, 0)
        if ok:
            return x


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 6), min_size=0, max_size=2), st.integers(2, 4))
def test_backward_matches_finite_differences(seed, hidden, n_classes):
    rng = np.random.default_rng(seed)
    model = build_mlp(3, hidden, n_classes, seed=seed)
    for layer in model.dense_layers:
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    x = kink_free_input(model, rng, 3)
    assert finite_difference_check(model, (x, int(rng.integers(n_classes))), 1e-5) < 1e-4


@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_dense_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    layer = Dense(rng.normal(size=(3, 4)), rng.normal(size=3), 0)
    x, y = rng.normal(size=4), rng.normal(size=4)
    lhs = dense_forward(a * x + b * y, layer)
    rhs = a * dense_forward(x, layer) + b * dense_forward(y, layer) - (a + b - 1) * layer.bias
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_forward_backward_deterministic():
    model = build_mlp(4, [6], 3, seed=2, fair_dropout=(0, 0.5, 0.5, 9))
    x = np.random.default_rng(1).normal(size=(5, 4))
    y = np.array([0, 1, 2, 0, 1])
    r1 = model.loss_and_grad(x, y, np.arange(5), mode="train")
    r2 = model.loss_and_grad(x, y, np.arange(5), mode="train")
    assert r1[0] == r2[0]
    assert r1[1].flat().tobytes() == r2[1].flat().tobytes()


def test_batch_gradient_is_mean_of_rows():
    model = build_mlp(4, [6], 3, seed=5)
    x = np.random.default_rng(1).normal(size=(4, 4))
    y = np.array([0, 1, 2, 0])
    _, g = model.loss_and_grad(x, y)
    rows = [model_backward(model, x[i], y[i]).flat() for i in range(4)]
    assert np.allclose(g.flat(), np.mean(rows, axis=0))


def test_model_rejects_width_mismatch():
    with pytest.raises(ShapeError):
        Model([Dense(np.ones((3, 2)), np.zeros(3), 0), Dense(np.ones((2, 4)), np.zeros(2), 1)])


def test_neuron_keep_zeroes_after_relu():
    model = build_mlp(2, [3], 2, seed=0)
    x = np.array([0.5, -0.25])
    keep = {0: np.array([True, False, True])}
    h = np.maximum(model.dense_layers[0].weights @ x + model.dense_layers[0].bias, 0)
    h[1] = 0
    expected = model.dense_layers[1].weights @ h + model.dense_layers[1].bias
    assert np.allclose(model.forward(x, neuron_keep=keep), expected)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = build_mlp(3, [4, 5], 2, seed=11, fair_dropout=(1, 0.4, 0.25, 123))
    model.mode = "train"
    text = model_to_json(model)
    again = model_to_json(model_from_json(text))
    assert again == text
    save_model(model, tmp_path / "m.json")
    loaded = load_model(tmp_path / "m.json")
    assert loaded.mode == "train" and loaded.seed == 11
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(loaded.forward(x, [0, 1, 2]), model.forward(x, [0, 1, 2]))
    fd = [l for l in loaded.layers if isinstance(l, FairDropout)][0]
    assert fd.config == FairDropoutConfig(5, 0.4, 0.25, 123)


def test_checkpoint_floats_use_17_digits():
    model = Model([Dense(np.array([[0.1]]), np.array([1 / 3]), 0)])
    text = model_to_json(model)
    assert "0.10000000000000001" in text
    assert "0.33333333333333331" in text
