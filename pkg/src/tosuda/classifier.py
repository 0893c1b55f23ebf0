"""Digit-style classifier: two conv+pool blocks, then three dense layers."""

import numpy as np

from .errors import DimensionError
from .layers import Conv2d, Linear, Module
from .tensor import Tensor, as_tensor, log_softmax, maxpool2d, no_grad, relu
from .utils.common import check_one_hot

INPUT_SIZE = 32


class ClassifierNet(Module):
    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.conv1 = Conv2d(channels, 32, 5, rng)
        self.conv2 = Conv2d(32, 64, 5, rng)
        # 32 → conv5 28 → pool 14 → conv5 10 → pool 5
        self.fc1 = Linear(64 * 5 * 5, 384, rng)
        self.fc2 = Linear(384, 192, rng)
        self.fc3 = Linear(192, num_classes, rng)

    def forward(self, x):
        return classify_forward(x, self)


def classify_forward(x, net):
    """Unnormalised logits B×K."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (net.channels, INPUT_SIZE, INPUT_SIZE):
        raise DimensionError(
            f"Classifier expects B×{net.channels}×{INPUT_SIZE}×{INPUT_SIZE}, got {x.shape}"
        )
    h = maxpool2d(relu(net.conv1(x)), 2)
    h = maxpool2d(relu(net.conv2(h)), 2)
    h = h.reshape(x.shape[0], -1)
    h = relu(net.fc1(h))
    h = relu(net.fc2(h))
    return net.fc3(h)


def cross_entropy(logits, y):
    """Mean over the batch of −log softmax(logits)[true class]; ``y`` is one-hot."""
    logits = as_tensor(logits)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    check_one_hot(y, name="y")
    if y.shape != logits.shape:
        raise DimensionError(f"Labels {y.shape} do not match logits {logits.shape}")
    return -(log_softmax(logits, axis=1) * y).sum(axis=1).mean()


def accuracy(logits, labels):
    """Fraction of samples whose first maximal logit is the true class."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predict_logits(net, images, batch_size=256):
    """Logits for a whole image array, evaluated in chunks without a graph."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(classify_forward(images[start : start + batch_size], net).data)
    if not chunks:
        return np.zeros((0, net.num_classes))
    return np.concatenate(chunks, axis=0)
