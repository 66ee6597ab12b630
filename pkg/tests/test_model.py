import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrwork.model import (ModelInputError, ModelSpec, Network, TrainedModel, TrainingError, _sgd_epoch,
                           classify, forward, loss_and_gradients, predict, sample_masks, sigmoid,
                           softplus, softplus_derivative, train_sgd)
from cdrwork.prep import fit_normalizer

from helpers import gradient_check


def test_softplus_examples():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    tail = softplus(-50.0)
    assert 0 < tail < 1e-20 and tail == pytest.approx(math.exp(-50), rel=1e-12)
    assert softplus(50.0) == pytest.approx(50.0, abs=1e-9)
    assert softplus(1000.0) == 1000.0
    a = np.linspace(-30, 30, 61)
    assert np.allclose(softplus(a), np.log1p(np.exp(a)), rtol=1e-12)


def test_softplus_derivative_is_sigmoid():
    a = np.linspace(-20, 20, 41)
    num = (softplus(a + 1e-6) - softplus(a - 1e-6)) / 2e-6
    assert np.allclose(softplus_derivative(a), num, atol=1e-8)
    assert np.allclose(sigmoid(a), 1 / (1 + np.exp(-a)), rtol=1e-12)
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0


def test_zero_network_outputs_half():
    net = Network([np.zeros((3, 4)), np.zeros((4, 1))], [np.zeros(4), np.zeros(1)])
    assert forward(net, np.ones((2, 3))).prob.tolist() == [0.5, 0.5]


def test_hand_computed_2_2_1():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    w2 = np.array([[2.0], [-1.0]])
    b2 = np.array([0.5])
    x = np.array([[1.0, 2.0]])
    h1 = math.log(1 + math.exp(1 * 1 + 2 * 0.5 + 0))
    h2 = math.log(1 + math.exp(1 * -1 + 2 * 2 - 1))
    z = 2 * h1 - h2 + 0.5
    p = 1 / (1 + math.exp(-z))
    fp = forward(Network([w1, w2], [b1, b2]), x)
    assert fp.hidden[0][0].tolist() == pytest.approx([h1, h2], abs=1e-14)
    assert fp.prob[0] == pytest.approx(p, abs=1e-14)


def test_dimension_mismatch():
    net = Network.initialize([3, 2, 1], np.random.default_rng(0))
    with pytest.raises(ModelInputError):
        forward(net, np.ones((1, 4)))


def test_gradient_check_random_networks():
    errors = [gradient_check(seed) for seed in range(25)]
    assert max(errors) < 1e-4


def test_fused_epoch_matches_generic_updates():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(70, 5))
    y = (rng.random(70) < 0.4).astype(float)
    net = Network.initialize([5, 6, 3, 1], rng)
    ref = net.copy()
    order = rng.permutation(70)
    rates = [0.1, 0.2, 0.2]
    masks = sample_masks(rng, 70, net, rates)
    fused_loss = _sgd_epoch(net, x, y, order, masks, 0.05, 16)
    losses = []
    for start in range(0, 70, 16):
        idx = order[start:start + 16]
        bm = [m[start:start + 16] for m in masks]
        loss, gw, gb = loss_and_gradients(ref, x[idx], y[idx], bm)
        losses.append(loss * len(idx))
        for layer in range(3):
            ref.weights[layer] -= 0.05 * gw[layer]
            ref.biases[layer] -= 0.05 * gb[layer]
    for a, b in zip(net.weights + net.biases, ref.weights + ref.biases):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
    assert fused_loss == pytest.approx(sum(losses) / 70, rel=1e-12)


def test_dropout_off_train_equals_inference():
    rng = np.random.default_rng(0)
    net = Network.initialize([4, 5, 1], rng)
    x = rng.normal(size=(8, 4))
    masks = sample_masks(rng, 8, net, [0.0, 0.0])
    assert masks == [None, None]
    assert np.array_equal(forward(net, x, masks).prob, forward(net, x).prob)


def test_inverted_dropout_scaling():
    rng = np.random.default_rng(0)
    net = Network.initialize([200, 50, 1], rng)
    m = sample_masks(rng, 400, net, [0.1, 0.2])
    assert np.allclose(np.unique(m[0]), [0.0, 1 / 0.9]) and np.allclose(np.unique(m[1]), [0.0, 1 / 0.8])
    assert abs(m[0].mean() - 1.0) < 0.01 and abs(m[1].mean() - 1.0) < 0.02


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.integers(0, 1000))
def test_probabilities_strictly_inside_unit_interval(scale, seed):
    rng = np.random.default_rng(seed)
    net = Network.initialize([3, 4, 1], rng)
    p = forward(net, rng.normal(size=(10, 3)) * scale).prob
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 10))
def test_output_bias_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    net = Network.initialize([3, 4, 1], rng)
    x = rng.normal(size=(20, 3))
    before = forward(net, x).prob
    net.biases[-1] += bump
    assert np.all(forward(net, x).prob >= before)
    assert np.all(forward(net, x).prob[(before > 1e-6) & (before < 1 - 1e-6)] >
                  before[(before > 1e-6) & (before < 1 - 1e-6)])


def test_classify_threshold():
    assert classify(np.array([0.5, 0.49, 0.51])).tolist() == [True, False, True]
    assert classify(0.3, threshold=0.3)


def _separable(seed, n=400):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    keep = np.abs(x[:, 0] + 0.5 * x[:, 1]) > 0.2
    return x[keep], y[keep]


def test_separable_data_fits():
    x, y = _separable(0)
    # logistic regression oracle on the same data
    w = np.zeros(3)
    xb = np.hstack([x, np.ones((len(x), 1))])
    for _ in range(3000):
        w -= 0.5 * xb.T @ (1 / (1 + np.exp(-xb @ w)) - y) / len(y)
    assert np.mean((xb @ w > 0) == y) >= 0.99
    net, trace = train_sgd(x, y, ModelSpec(seed=0), np.random.default_rng(0))
    assert np.mean(classify(forward(net, x).prob) == y) >= 0.99
    assert trace[-1] < trace[0]


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases(seed):
    x, y = _separable(seed, 200)
    _, trace = train_sgd(x, y, ModelSpec(epochs=10, seed=seed), np.random.default_rng(seed))
    assert len(trace) == 10 and trace[-1] < trace[0]


def test_training_is_deterministic():
    x, y = _separable(1, 200)
    spec = ModelSpec(epochs=5)
    a, ta = train_sgd(x, y, spec, np.random.default_rng(3))
    b, tb = train_sgd(x, y, spec, np.random.default_rng(3))
    assert ta == tb
    assert all(np.array_equal(p, q) for p, q in zip(a.weights + a.biases, b.weights + b.biases))


def test_non_finite_loss_aborts():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3)) * 1e150
    y = (rng.random(64) < 0.5).astype(float)
    with pytest.raises(TrainingError, match="learning rate"):
        train_sgd(x, y, ModelSpec(learning_rate=1e10, epochs=3), rng)


def test_spec_validation():
    for bad in (dict(hidden_sizes=()), dict(hidden_sizes=(0,)), dict(input_dropout=1.0),
                dict(hidden_dropout=-0.1), dict(learning_rate=0), dict(epochs=0)):
        with pytest.raises(ValueError):
            ModelSpec(**bad)
    assert ModelSpec().layer_sizes(10) == [10, 64, 64, 1]
    assert ModelSpec().dropout_rates() == [0.1, 0.2, 0.2]


def _trained(x, names, y, seed=0):
    norm = fit_normalizer(x, names, range(len(x)))
    spec = ModelSpec(hidden_sizes=(8,), epochs=5, seed=seed)
    net, trace = train_sgd(norm.transform(x, names), y, spec, np.random.default_rng(seed))
    return TrainedModel("student", spec, net, norm, "abc", 1, trace)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 4))
    x[3, 1] = np.nan
    y = (x[:, 0] > 0).astype(float)
    model = _trained(x, list("abcd"), y)
    model.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    assert back.to_json() == model.to_json()
    assert np.array_equal(predict(back, x, list("abcd")), predict(model, x, list("abcd")))
    assert json.loads(model.to_json())["format"] == "cdrwork-model"
    with pytest.raises(FileNotFoundError):
        TrainedModel.load(tmp_path / "none.json")
    with pytest.raises(ModelInputError):
        TrainedModel.from_json('{"format": "other"}')


def test_column_order_invariance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(120, 5))
    y = (x[:, 0] - x[:, 3] > 0).astype(float)
    names = ["a", "b", "c", "d", "e"]
    perm = [3, 0, 4, 2, 1]
    m1 = _trained(x, names, y, seed=2)
    m2 = _trained(x[:, perm], [names[i] for i in perm], y, seed=2)
    assert np.array_equal(predict(m1, x, names), predict(m2, x[:, perm], [names[i] for i in perm]))
