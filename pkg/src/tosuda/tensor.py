"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its result with ``Tensor._from_op``, which records the parent
tensors and a closure mapping the output gradient to one gradient per parent.
``backward`` orders the recorded graph into a ``Tape`` and sweeps it once in
reverse. A new graph is recorded on every forward pass.
"""

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericDomainError

ARCCOS_CLAMP = 1e-7

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation, frozen forward passes)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    # ndarray (op) Tensor defers to the Tensor's reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def requires_grad_(self, flag=True):
        self.requires_grad = bool(flag)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale_shift(self, -1.0, 0.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Recorded tensors in topological order: every node follows its inputs."""

    def __init__(self, nodes=()):
        self.nodes = list(nodes)

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss):
        order = []
        seen = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss, tape=None):
    """
    Accumulate dLoss/dLeaf into ``grad`` of every requires_grad leaf reachable
    from ``loss``. Gradients add to whatever the leaves already hold.

    Returns the tape that was swept.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_loss(loss)
    if not loss.requires_grad:
        return tape

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return tape


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"Cannot broadcast shapes {a.shape} and {b.shape}")


# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    if np.any(b.data == 0.0):
        raise NumericDomainError("Division by zero")

    def _backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), _backward)


def power(x, exponent):
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return Tensor._from_op(np.power(x.data, exponent), (x,), _backward)


# pointwise functions


def relu(x):
    mask = x.data > 0.0

    def _backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), _backward)


def tanh(x):
    t = np.tanh(x.data)

    def _backward(g):
        return (g * (1.0 - t * t),)

    return Tensor._from_op(t, (x,), _backward)


def exp(x):
    e = np.exp(x.data)

    def _backward(g):
        return (g * e,)

    return Tensor._from_op(e, (x,), _backward)


def log(x):
    if np.any(x.data <= 0.0):
        raise NumericDomainError("log needs strictly positive inputs")

    def _backward(g):
        return (g / x.data,)

    return Tensor._from_op(np.log(x.data), (x,), _backward)


def cos(x):
    def _backward(g):
        return (-g * np.sin(x.data),)

    return Tensor._from_op(np.cos(x.data), (x,), _backward)


def arccos(x):
    # the derivative is taken at the clamped input; the value itself is exact
    if np.any(np.abs(x.data) > 1.0):
        raise NumericDomainError("arccos needs inputs in [-1, 1]")
    clamped = np.clip(x.data, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)

    def _backward(g):
        return (-g / np.sqrt(1.0 - clamped * clamped),)

    return Tensor._from_op(np.arccos(x.data), (x,), _backward)


def scale_shift(x, scale, shift):
    scale, shift = float(scale), float(shift)

    def _backward(g):
        return (g * scale,)

    return Tensor._from_op(x.data * scale + shift, (x,), _backward)


POINTWISE = {
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "cos": cos,
    "arccos": arccos,
}


def pointwise(x, f, scale=1.0, shift=0.0):
    """Apply one of the named pointwise functions (or ``scale-shift``)."""
    if f in ("scale-shift", "scale_shift"):
        return scale_shift(x, scale, shift)
    try:
        return POINTWISE[f](x)
    except KeyError:
        raise ContractError(f"Unknown pointwise function {f}")


# shape and reduction


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), _backward)


def mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale_shift(tensor_sum(x, axes, keepdims), 1.0 / count, 0.0)


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} to {tuple(shape)}")

    def _backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(data, (x,), _backward)


def transpose(x, axes=None):
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def _backward(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), _backward)


def getitem(x, index):
    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), _backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"Cannot concatenate shapes {shapes} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(data, tuple(tensors), _backward)


# linear algebra


def matmul(a, b):
    """
    Matrix product a[m×k] @ b[k×n]. Leading batch extents, when present, must
    be identical on both sides.
    """
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), _backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    softmax = np.exp(out)

    def _backward(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), _backward)


# convolution and pooling


def conv2d(x, w, stride=1, padding=0):
    """
    Cross-correlation of x[B×C×H×W] with w[F×C×kh×kw]. ``padding`` zero-pads
    both spatial sides symmetrically before the valid convolution.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape} and {w.shape}")
    batch, channels, height, width = x.shape
    filters, kernel_channels, kh, kw = w.shape
    if channels != kernel_channels:
        raise DimensionError(f"Channel mismatch between input {x.shape} and kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"Invalid stride {stride} or padding {padding}")
    padded_h, padded_w = height + 2 * padding, width + 2 * padding
    if kh > padded_h or kw > padded_w:
        raise DimensionError(
            f"Kernel {kh}×{kw} is larger than the (padded) input {padded_h}×{padded_w}"
        )

    if padding:
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        xp = np.pad(x.data, pad)
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :,
                        :,
                        i : i + stride * (out_h - 1) + 1 : stride,
                        j : j + stride * (out_w - 1) + 1 : stride,
                    ] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + height, padding : padding + width]
        return gx, gw

    return Tensor._from_op(out, (x, w), _backward)


def _pool_windows(data, k):
    batch, channels, height, width = data.shape
    return (
        data.reshape(batch, channels, height // k, k, width // k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, height // k, width // k, k * k)
    )


def _check_pool(x, k):
    if x.ndim != 4:
        raise DimensionError(f"Pooling needs a 4-D input, got {x.shape}")
    if k < 1 or x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"Spatial extents of {x.shape} are not divisible by {k}")


def maxpool2d(x, k):
    """Non-overlapping k×k max pooling; ties send the gradient to the first element."""
    _check_pool(x, k)
    batch, channels, height, width = x.shape
    windows = _pool_windows(x.data, k)
    index = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, index, axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, index, g[..., None], axis=-1)
        gx = (
            gw.reshape(batch, channels, height // k, width // k, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(x.shape)
        )
        return (gx,)

    return Tensor._from_op(out, (x,), _backward)


def avg_pool2d(x, k):
    _check_pool(x, k)
    batch, channels, height, width = x.shape
    return x.reshape(batch, channels, height // k, k, width // k, k).mean(axis=(3, 5))


# sampling


def base_grid(height, width):
    """Homogeneous normalised pixel centres (u, v, 1), shape H×W×3, align-corners."""
    u = np.linspace(-1.0, 1.0, width)
    v = np.linspace(-1.0, 1.0, height)
    grid = np.empty((height, width, 3))
    grid[..., 0] = u[None, :]
    grid[..., 1] = v[:, None]
    grid[..., 2] = 1.0
    return grid


def affine_grid(theta, height, width):
    """Sampling coordinates theta·(u, v, 1) for every output pixel, B×H×W×2."""
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise DimensionError(f"affine_grid needs B×2×3 matrices, got {theta.shape}")
    grid = base_grid(height, width)
    coords = np.tensordot(grid, theta.data, axes=([2], [2])).transpose(2, 0, 1, 3)

    def _backward(g):
        return (np.tensordot(g, grid, axes=([1, 2], [0, 1])),)

    return Tensor._from_op(np.ascontiguousarray(coords), (theta,), _backward)


def bilinear_sample(x, coords):
    """
    Sample x[B×C×H×W] at normalised coords[B×H'×W'×2] (last axis is (x, y),
    −1 ↦ first pixel, +1 ↦ last pixel). Neighbours outside the image read as 0.
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise DimensionError(f"Cannot sample {x.shape} at coordinates {coords.shape}")
    if coords.shape[0] != x.shape[0]:
        raise DimensionError(f"Batch mismatch between {x.shape} and {coords.shape}")
    batch, channels, height, width = x.shape
    px = (coords.data[..., 0] + 1.0) * 0.5 * (width - 1)
    py = (coords.data[..., 1] + 1.0) * 0.5 * (height - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    b = np.arange(batch)[:, None, None]
    image = x.data.transpose(0, 2, 3, 1)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            xc = np.clip(xi, 0, width - 1)
            yc = np.clip(yi, 0, height - 1)
            values = image[b, yc, xc] * valid[..., None]
            corners.append((yc, xc, valid, values))
    v00, v01, v10, v11 = (corner[3] for corner in corners)

    out = (
        (wy0 * wx0)[..., None] * v00
        + (wy0 * wx1)[..., None] * v01
        + (wy1 * wx0)[..., None] * v10
        + (wy1 * wx1)[..., None] * v11
    )

    def _backward(g):
        gt = g.transpose(0, 2, 3, 1)
        gx = gc = None
        if x.requires_grad:
            gimage = np.zeros(image.shape)
            for (yc, xc, valid, _), weight in zip(
                corners, (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1)
            ):
                np.add.at(gimage, (b, yc, xc), gt * (weight * valid)[..., None])
            gx = gimage.transpose(0, 3, 1, 2)
        if coords.requires_grad:
            d_px = (gt * (wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10))).sum(-1)
            d_py = (gt * (wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01))).sum(-1)
            gc = np.stack(
                [d_px * 0.5 * (width - 1), d_py * 0.5 * (height - 1)], axis=-1
            )
        return gx, gc

    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return Tensor._from_op(data, (x, coords), _backward)
