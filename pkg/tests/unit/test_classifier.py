"""Unit tests for classifier.py."""

import numpy as np
import pytest

from tosuda.classifier import (
    ClassifierNet,
    accuracy,
    classify_forward,
    cross_entropy,
    predict_logits,
)
from tosuda.errors import ContractError, DimensionError
from tosuda.tensor import Tensor, backward
from tosuda.utils.common import one_hot


@pytest.fixture
def net(rng):
    return ClassifierNet(3, 5, rng)


def test_forward_shapes_and_size_check(net, rng):
    """Test classify_forward on valid and invalid inputs."""
    # This test verifies that:
    # 1. A B×3×32×32 batch gives B×K logits
    # 2. A wrong spatial size raises DimensionError
    logits = classify_forward(rng.uniform(0.0, 1.0, (4, 3, 32, 32)), net)
    assert logits.shape == (4, 5)
    with pytest.raises(DimensionError):
        classify_forward(np.zeros((1, 3, 28, 28)), net)


def test_zero_weight_net_gives_zero_logits(net):
    """Test the zero case."""
    # This test verifies that:
    # 1. With every parameter at zero, the logits are zero
    for p in net.parameters():
        p.data = np.zeros(p.shape)
    logits = classify_forward(np.ones((2, 3, 32, 32)), net)
    assert np.array_equal(logits.data, np.zeros((2, 5)))


def test_forward_is_per_sample(net, rng):
    """Test that permuting the batch permutes the logits."""
    # This test verifies that:
    # 1. Samples do not influence each other's logits
    x = rng.uniform(0.0, 1.0, (3, 3, 32, 32))
    order = [2, 0, 1]
    assert np.allclose(classify_forward(x[order], net).data, classify_forward(x, net).data[order])


def test_cross_entropy_values(rng):
    """Test cross_entropy against known values and a direct formula."""
    # This test verifies that:
    # 1. Uniform logits give ln K for any labels
    # 2. A large margin on the true class drives the loss towards 0
    # 3. Random logits match -log(softmax) computed directly to 1e-10
    y = one_hot([0, 3, 9], 10)
    assert abs(cross_entropy(np.zeros((3, 10)), y).item() - np.log(10)) < 1e-12

    confident = np.where(y == 1.0, 50.0, 0.0)
    assert cross_entropy(confident, y).item() < 1e-15

    logits = rng.standard_normal((3, 10)) * 3.0
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    direct = -np.mean(np.log(probs[np.arange(3), [0, 3, 9]]))
    assert abs(cross_entropy(logits, y).item() - direct) < 1e-10


def test_cross_entropy_gradient_is_softmax_minus_labels(rng, gradcheck):
    """Test the cross_entropy gradient."""
    # This test verifies that:
    # 1. d(loss)/d(logits) = (softmax - y) / B
    # 2. The gradient passes the central-difference check
    logits = rng.standard_normal((4, 5))
    y = one_hot([1, 0, 4, 4], 5)
    t = Tensor(logits, requires_grad=True)
    backward(cross_entropy(t, y))
    softmax = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(t.grad, (softmax - y) / 4, atol=1e-12)
    assert gradcheck(lambda l: cross_entropy(l, y), [logits]) < 1e-4


def test_cross_entropy_contract():
    """Test cross_entropy with labels that are not one-hot."""
    # This test verifies that:
    # 1. Soft labels raise ContractError
    # 2. Labels of the wrong shape raise DimensionError
    with pytest.raises(ContractError):
        cross_entropy(np.zeros((2, 3)), np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), one_hot([0, 1], 4))


def test_accuracy():
    """Test accuracy on hand-built logits."""
    # This test verifies that:
    # 1. Three correct out of four gives 0.75
    # 2. Ties go to the lowest class index
    # 3. Adding a constant to a sample's logits changes nothing
    # 4. True class minimal everywhere gives 0.0
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0], [5.0, 0.0]])
    labels = np.array([0, 1, 0, 1])
    assert accuracy(logits, labels) == 0.75
    assert accuracy(logits + np.array([[10.0], [-3.0], [7.0], [1.0]]), labels) == 0.75
    assert accuracy(-np.eye(3), np.arange(3)) == 0.0
    assert accuracy(np.eye(3), np.arange(3)) == 1.0


def test_predict_logits_chunks(net, rng):
    """Test predict_logits against a single forward pass."""
    # This test verifies that:
    # 1. Chunked evaluation equals one forward pass over the whole array
    # 2. An empty array gives an empty K-column result
    x = rng.uniform(0.0, 1.0, (5, 3, 32, 32))
    chunked = predict_logits(net, x, batch_size=2)
    assert np.allclose(chunked, classify_forward(x, net).data, atol=1e-12)
    assert predict_logits(net, np.zeros((0, 3, 32, 32))).shape == (0, 5)


def test_classifier_input_gradient(rng):
    """Test the gradient of the classification loss with respect to the input."""
    # This test verifies that:
    # 1. d(cross entropy)/d(x) through the whole classifier agrees with central
    #    differences at 20 random pixels
    net = ClassifierNet(1, 3, rng)
    x = rng.uniform(0.0, 1.0, (1, 1, 32, 32))
    y = one_hot([2], 3)
    t = Tensor(x, requires_grad=True)
    backward(cross_entropy(classify_forward(t, net), y))

    eps = 1e-6
    scale = np.abs(t.grad).max()
    for flat in rng.choice(x.size, size=20, replace=False):
        index = np.unravel_index(flat, x.shape)
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric = (
            cross_entropy(classify_forward(plus, net), y).item()
            - cross_entropy(classify_forward(minus, net), y).item()
        ) / (2 * eps)
        assert abs(numeric - t.grad[index]) <= 1e-4 * scale
