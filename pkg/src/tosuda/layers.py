"""Parameter containers built on ``tosuda.tensor``."""

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, conv2d, relu
from .utils.common import digest_arrays


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """
    Base class: Tensor and Module attributes are registered in assignment
    order, which fixes parameter names (``conv1.weight``) and iteration order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        named = [(f"{prefix}{name}", p) for name, p in self._params.items()]
        for name, child in self._children.items():
            named.extend(child.named_parameters(f"{prefix}{name}."))
        return named

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        """Copy arrays from ``state`` (keys carry ``prefix``) into the parameters."""
        params = self.named_parameters(prefix)
        missing = [name for name, _ in params if name not in state]
        if missing:
            raise ContractError(f"Missing tensors for {type(self).__name__}: {missing}")
        arrays = [np.asarray(state[name], dtype=np.float64) for name, _ in params]
        for (name, p), array in zip(params, arrays):
            if array.shape != p.shape:
                raise DimensionError(
                    f"Tensor {name} has shape {array.shape}, expected {p.shape}"
                )
        # all shapes checked before any parameter changes
        for (_, p), array in zip(params, arrays):
            p.data = array.copy()

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def grad_digest(self):
        return digest_arrays(
            {
                name: p.grad if p.grad is not None else np.zeros_like(p.data)
                for name, p in self.named_parameters()
            }
        )

    def digest(self):
        return digest_arrays(self.state_dict())


class Linear(Module):
    def __init__(self, in_features, out_features, rng, zero=False):
        super().__init__()
        if zero:
            weight = np.zeros((in_features, out_features))
        else:
            weight = he_normal(rng, (in_features, out_features), in_features)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise DimensionError(
                f"Linear layer expects B×{self.weight.shape[0]} input, got {x.shape}"
            )
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        super().__init__()
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(he_normal(rng, shape, fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x):
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class Mlp(Module):
    """Perceptron with relu hidden layers and a zero-initialised output layer."""

    def __init__(self, in_features, hidden_width, hidden_layers, out_features, rng):
        super().__init__()
        self.depth = hidden_layers
        width = in_features
        for i in range(hidden_layers):
            setattr(self, f"hidden{i}", Linear(width, hidden_width, rng))
            width = hidden_width
        self.head = Linear(width, out_features, rng, zero=True)

    def forward(self, x):
        for i in range(self.depth):
            x = relu(getattr(self, f"hidden{i}")(x))
        return self.head(x)
