"""Test fixtures for tosuda."""

import numpy as np
import pytest
from pathlib import Path

from tosuda.tensor import Tensor, backward

FIXTURES = Path(__file__).parent / "fixtures"


def numeric_gradients(f, arrays, eps=1e-6):
    """Central differences of the scalar f(*arrays) for every input element."""
    grads = []
    for array in arrays:
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + eps
            plus = f(*[Tensor(a) for a in arrays]).item()
            array[index] = original - eps
            minus = f(*[Tensor(a) for a in arrays]).item()
            array[index] = original
            grad[index] = (plus - minus) / (2.0 * eps)
        grads.append(grad)
    return grads


def analytic_gradients(f, arrays):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(f(*tensors))
    return [t.grad for t in tensors]


def gradient_error(f, arrays, eps=1e-6):
    """
    Largest |analytic - numeric| over all inputs, relative to the larger of
    the two gradients' largest magnitudes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = analytic_gradients(f, arrays)
    numeric = numeric_gradients(f, arrays, eps)
    diff = max(float(np.abs(a - n).max()) for a, n in zip(analytic, numeric))
    scale = max(
        max(float(np.abs(a).max()) for a in analytic),
        max(float(np.abs(n).max()) for n in numeric),
        1e-12,
    )
    return diff / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradcheck():
    """gradcheck(f, arrays, eps) -> relative gradient error."""
    return gradient_error


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def tiny_config_file(tmp_path):
    """A synthetic run small enough to train in seconds."""
    path = tmp_path / "tiny.conf"
    path.write_text((FIXTURES / "tiny_run.conf").read_text())
    return path
