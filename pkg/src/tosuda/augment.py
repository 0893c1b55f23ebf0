"""
Learnable augmentation applied to source images.

Colour first, then geometry:

    x_c = TriangleWave(alpha ⊙ x + beta),   (alpha, beta) = ColorNet(x, z, c)
    x̂  = Affine(x_c, A + I),               A = GeoNet(z, c)

Both nets end in a zero-initialised layer, so a fresh module is the identity.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Mlp, Module
from .tensor import (
    Tensor,
    affine_grid,
    as_tensor,
    avg_pool2d,
    bilinear_sample,
    concat,
    scale_shift,
    tanh,
)
from .utils.common import check_one_hot

IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class AugmentConfig:
    g_c: float = 0.5
    g_geo: float = 0.25
    noise_dim: int = 16
    hidden_width: int = 128
    hidden_layers: int = 2
    pooled_size: int = 8

    def __post_init__(self):
        if not (np.isfinite(self.g_c) and np.isfinite(self.g_geo)):
            raise ConfigError(f"Augmentation gains must be finite, got {self.g_c}, {self.g_geo}")
        if self.g_c < 0 or self.g_geo < 0:
            raise ConfigError(f"Augmentation gains must be >= 0, got {self.g_c}, {self.g_geo}")
        for name in ("noise_dim", "hidden_width", "hidden_layers", "pooled_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class AugmentationParams:
    alpha: Tensor
    beta: Tensor
    A: Tensor

    def within_bounds(self, g_c, g_geo, tol=1e-12):
        return bool(
            np.all(np.abs(self.alpha.data - 1.0) <= g_c + tol)
            and np.all(np.abs(self.beta.data) <= g_c + tol)
            and np.all(np.abs(self.A.data) <= g_geo + tol)
        )


def triangle_wave(p):
    """
    arccos(cos(p·π))/π, evaluated as the equivalent fold of p into [0, 1]
    (period 2, even). The derivative is sign(sin(p·π)), 0 at integer p.
    """
    p = as_tensor(p)
    folded = np.mod(p.data, 2.0)
    value = np.where(folded <= 1.0, folded, 2.0 - folded)
    slope = np.where(
        (folded == 0.0) | (folded == 1.0) | (folded == 2.0),
        0.0,
        np.where(folded < 1.0, 1.0, -1.0),
    )

    def _backward(g):
        return (g * slope,)

    return Tensor._from_op(value, (p,), _backward)


class ColorNet(Module):
    def __init__(self, channels, num_classes, config, rng):
        super().__init__()
        self.channels = channels
        self.pooled_size = config.pooled_size
        in_features = channels * config.pooled_size**2 + config.noise_dim + num_classes
        self.mlp = Mlp(
            in_features, config.hidden_width, config.hidden_layers, 2 * channels, rng
        )

    def encode(self, x):
        """Average-pool the image to pooled_size × pooled_size and flatten."""
        batch, channels, height, width = x.shape
        k = height // self.pooled_size
        if k < 1 or width // self.pooled_size != k:
            raise DimensionError(
                f"Image {height}×{width} cannot be pooled to "
                f"{self.pooled_size}×{self.pooled_size}"
            )
        return avg_pool2d(x, k).reshape(batch, channels * self.pooled_size**2)

    def forward(self, features):
        return self.mlp(features)


class GeoNet(Module):
    def __init__(self, num_classes, config, rng):
        super().__init__()
        in_features = config.noise_dim + num_classes
        self.mlp = Mlp(in_features, config.hidden_width, config.hidden_layers, 6, rng)

    def forward(self, features):
        return self.mlp(features)


def _context(z, c):
    z, c = as_tensor(z), as_tensor(c)
    check_one_hot(c.data)
    if z.ndim != 2 or z.shape[0] != c.shape[0]:
        raise DimensionError(f"Noise {z.shape} does not match class context {c.shape}")
    return z, c


def color_params(x, z, c, net, g_c):
    z, c = _context(z, c)
    if x.shape[1] != net.channels:
        raise DimensionError(f"ColorNet expects {net.channels} channels, got {x.shape}")
    features = concat([net.encode(x), z, c], axis=1)
    raw = net(features)
    channels = net.channels
    alpha = scale_shift(tanh(raw[:, :channels]), g_c, 1.0)
    beta = scale_shift(tanh(raw[:, channels:]), g_c, 0.0)
    return alpha, beta


def apply_color(x, alpha, beta):
    x, alpha, beta = as_tensor(x), as_tensor(alpha), as_tensor(beta)
    batch, channels = alpha.shape
    p = alpha.reshape(batch, channels, 1, 1) * x + beta.reshape(batch, channels, 1, 1)
    return triangle_wave(p)


def geometric_params(z, c, net, g_geo):
    z, c = _context(z, c)
    raw = net(concat([z, c], axis=1))
    return scale_shift(tanh(raw), g_geo, 0.0).reshape(z.shape[0], 2, 3)


def apply_affine(x, A):
    x, A = as_tensor(x), as_tensor(A)
    theta = A + IDENTITY_AFFINE
    coords = affine_grid(theta, x.shape[2], x.shape[3])
    return bilinear_sample(x, coords)


def augment(x, y_onehot, z, nets):
    """
    Colour then geometry, both driven by the same per-sample noise ``z``.

    Returns (x̂, AugmentationParams).
    """
    x = as_tensor(x)
    config = nets.config
    alpha, beta = color_params(x, z, y_onehot, nets.color, config.g_c)
    A = geometric_params(z, y_onehot, nets.geo, config.g_geo)
    x_hat = apply_affine(apply_color(x, alpha, beta), A)
    return x_hat, AugmentationParams(alpha, beta, A)


class AugmentationModule(Module):
    """The colour and geometric nets plus the gains that bound their outputs."""

    def __init__(self, channels, num_classes, rng, config=None):
        super().__init__()
        self.config = config or AugmentConfig()
        self.channels = channels
        self.num_classes = num_classes
        self.color = ColorNet(channels, num_classes, self.config, rng)
        self.geo = GeoNet(num_classes, self.config, rng)

    def sample_noise(self, rng, batch_size):
        return rng.standard_normal((batch_size, self.config.noise_dim))

    def forward(self, x, y_onehot, z):
        return augment(x, y_onehot, z, self)
