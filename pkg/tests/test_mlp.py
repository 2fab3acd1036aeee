import itertools
import math

import numpy as np
import pytest

from mcvos.mlp import (
    Layer,
    LabelOutOfRange,
    MlpModel,
    TraceMismatch,
    ZeroLogitVector,
    backward,
    cross_entropy_loss,
    forward,
    init_mlp,
    logit_norm_loss,
    softmax,
)
from mcvos.numerics import RngStream
from mcvos.utils import DimensionMismatch


def numeric_gradient(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        shifted = x.copy()
        shifted[index] += eps
        upper = f(shifted)
        shifted[index] -= 2 * eps
        lower = f(shifted)
        grad[index] = (upper - lower) / (2 * eps)
    return grad


def small_model(dropout=0.0, seed=0):
    return init_mlp(3, 4, hidden=(5, 6), dropout=dropout, rng=RngStream(seed, 4))


def test_softmax():
    probs = softmax(np.array([[1000.0, 1000.0], [0.0, math.log(3.0)]]))
    np.testing.assert_allclose(probs, [[0.5, 0.5], [0.25, 0.75]])
    np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))


def test_cross_entropy_loss():
    loss, grad = cross_entropy_loss(np.array([0.0, 0.0]), 1)
    assert loss == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(grad, [0.5, -0.5])

    logits = np.array([[2.0, -1.0, 0.5], [0.1, 0.2, 0.3]])
    labels = np.array([0, 2])
    loss, grad = cross_entropy_loss(logits, labels)
    numeric = numeric_gradient(lambda z: cross_entropy_loss(z, labels)[0], logits)
    np.testing.assert_allclose(grad, numeric, atol=1e-8)
    # Large logits stay finite.
    assert np.isfinite(cross_entropy_loss(np.array([1e4, -1e4]), 1)[0])


def test_cross_entropy_label_errors():
    with pytest.raises(LabelOutOfRange):
        cross_entropy_loss(np.zeros(3), 3)
    with pytest.raises(LabelOutOfRange):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, -1]))
    with pytest.raises(DimensionMismatch):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0]))


def test_logit_norm_loss():
    logits = np.array([[2.0, -1.0, 0.5], [0.1, 0.2, 0.3]])
    labels = np.array([1, 2])
    loss, grad = logit_norm_loss(logits, labels, tau=0.5)
    numeric = numeric_gradient(lambda z: logit_norm_loss(z, labels, tau=0.5)[0], logits)
    np.testing.assert_allclose(grad, numeric, atol=1e-7)
    # Invariant to positive rescaling of the logits.
    assert logit_norm_loss(7.0 * logits, labels, tau=0.5)[0] == pytest.approx(loss)
    # The gradient is orthogonal to the logit vector.
    np.testing.assert_allclose(np.sum(grad * logits, axis=1), 0.0, atol=1e-12)


def test_logit_norm_loss_errors():
    with pytest.raises(ZeroLogitVector):
        logit_norm_loss(np.zeros(3), 0, tau=0.04)
    with pytest.raises(ValueError):
        logit_norm_loss(np.ones(3), 0, tau=0.0)


def test_init_mlp():
    model = small_model()
    assert model.layer_shapes == ((3, 5), (5, 6), (6, 4))
    assert model.input_dim == 3
    assert model.class_count == 4
    assert model.feature_dim == 6
    assert np.all(np.abs(model.layers[0].weight) <= math.sqrt(6.0 / 3))
    np.testing.assert_array_equal(model.layers[1].bias, np.zeros(6))
    np.testing.assert_array_equal(model.layers[0].weight, small_model().layers[0].weight)


def test_model_validation():
    with pytest.raises(ValueError):
        MlpModel(layers=())
    with pytest.raises(DimensionMismatch):
        MlpModel(layers=(Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 2)), np.zeros(2))))
    with pytest.raises(ValueError):
        MlpModel(layers=(Layer(np.zeros((2, 3)), np.zeros(3)),), dropout=1.0)


def test_forward():
    model = small_model(dropout=0.5)
    x = np.array([[0.5, -1.0, 2.0], [1.0, 0.0, -0.5]])
    trace = forward(model, x)
    assert trace.logits.shape == (2, 4)
    assert trace.features.shape == (2, 6)
    assert trace.masks is None
    np.testing.assert_array_equal(forward(model, x[0]).output(forward(model, x[0]).logits), trace.logits[0])

    # Dropout passes depend only on the stream.
    first = forward(model, x, RngStream(0, 9)).logits
    np.testing.assert_array_equal(first, forward(model, x, RngStream(0, 9)).logits)
    assert not np.array_equal(first, forward(model, x, RngStream(0, 10)).logits)

    with pytest.raises(DimensionMismatch):
        forward(model, np.zeros((2, 4)))


def test_forward_standardizes_inputs():
    model = small_model()
    shifted = MlpModel(layers=model.layers, dropout=0.0,
                       input_shift=np.array([1.0, 2.0, 3.0]), input_scale=np.array([2.0, 2.0, 4.0]))
    x = np.array([[3.0, 4.0, 7.0]])
    np.testing.assert_allclose(forward(shifted, x).logits, forward(model, np.array([[1.0, 1.0, 1.0]])).logits)


@pytest.mark.parametrize('seed', range(100))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    logits = rng.normal(0.0, 2.0, size=(n, k))
    labels = rng.integers(0, k, size=n)
    _, grad = cross_entropy_loss(logits, labels)
    numeric = numeric_gradient(lambda z: cross_entropy_loss(z, labels)[0], logits)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)

    tau = rng.uniform(0.04, 1.0)
    _, grad = logit_norm_loss(logits, labels, tau=tau)
    numeric = numeric_gradient(lambda z: logit_norm_loss(z, labels, tau=tau)[0], logits)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_logit_norm_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, k = int(rng.integers(1, 8)), int(rng.integers(2, 10))
        logits = rng.normal(0.0, rng.uniform(0.1, 5.0), size=(n, k))
        labels = rng.integers(0, k, size=n)
        tau = rng.uniform(0.04, 1.0)
        loss = logit_norm_loss(logits, labels, tau=tau)[0]
        for scale in (1e-3, 1.0, 1e3):
            assert abs(logit_norm_loss(scale * logits, labels, tau=tau)[0] - loss) < 1e-9


@pytest.mark.parametrize('seed', range(100))
def test_backward_matches_finite_differences(seed):
    dropout = 0.3 if seed % 2 else 0.0
    model = small_model(dropout=dropout, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    labels = rng.integers(0, 4, size=4)
    trace = forward(model, x, RngStream(seed, 5))
    _, dlogits = cross_entropy_loss(trace.logits, labels)
    gradients = backward(model, trace, dlogits)

    def loss_with(layer_index, name, value):
        layers = list(model.layers)
        layer = layers[layer_index]
        layers[layer_index] = (Layer(weight=value, bias=layer.bias) if name == 'weight'
                               else Layer(weight=layer.weight, bias=value))
        return cross_entropy_loss(forward(model.with_layers(layers), x, RngStream(seed, 5)).logits, labels)[0]

    for index, layer in enumerate(model.layers):
        for name in ('weight', 'bias'):
            numeric = numeric_gradient(lambda value: loss_with(index, name, value), getattr(layer, name))
            np.testing.assert_allclose(getattr(gradients[index], name), numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize('dropout', [0.0, 0.1, 0.5])
def test_deterministic_forward_is_the_dropout_expectation(dropout):
    model = init_mlp(3, 4, hidden=(6,), dropout=dropout, rng=RngStream(2, 4))
    x = np.array([[0.3, -1.2, 0.8]])
    trace = forward(model, x)
    deterministic = trace.logits[0]

    # Exact expectation over every keep-mask of the hidden layer.
    keep = 1.0 - dropout
    hidden, last = trace.features[0], model.layers[-1]
    expectation = np.zeros(4)
    for mask in itertools.product([0.0, 1.0], repeat=6):
        kept = int(sum(mask))
        weight = keep**kept * dropout**(6 - kept)
        if weight > 0:
            expectation += weight * ((hidden * np.array(mask) / keep) @ last.weight + last.bias)
    np.testing.assert_allclose(expectation, deterministic, atol=1e-12)

    samples = forward(model, np.repeat(x, 40000, axis=0), RngStream(2, 6)).logits
    tolerance = 6.0 * samples.std(axis=0) / np.sqrt(samples.shape[0]) + 1e-12
    assert np.all(np.abs(samples.mean(axis=0) - deterministic) <= tolerance)


def test_backward_trace_mismatch():
    model = small_model()
    trace = forward(model, np.zeros((2, 3)))
    other = init_mlp(3, 4, hidden=(5,), rng=RngStream(0))
    with pytest.raises(TraceMismatch):
        backward(other, trace, np.zeros((2, 4)))
    with pytest.raises(TraceMismatch):
        backward(model, trace, np.zeros((3, 4)))
