"""
Style alignment: Gram matrices of a frozen convolutional feature extractor.

The extractor has four relu-tapped convolutions (C→16, 16→32 /2, 32→64 /2,
64→128 /2) with seeded He-normal weights and zero biases. Pretrained weights
can replace them through ``load_state_dict`` with ``extractor.`` names.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .layers import Conv2d, Module
from .logger import logger
from .tensor import as_tensor, matmul, no_grad, relu

TAP_WIDTHS = (16, 32, 64, 128)
MIN_INPUT_SIZE = 8


class StyleExtractor(Module):
    def __init__(self, channels, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.conv1 = Conv2d(channels, 16, 3, rng, stride=1, padding=1)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(32, 64, 3, rng, stride=2, padding=1)
        self.conv4 = Conv2d(64, 128, 3, rng, stride=2, padding=1)
        self.requires_grad_(False)
        # counts forward passes; ablations that drop the style term must leave it at 0
        self.calls = 0

    def requires_grad_(self, flag=True):
        # frozen for good
        return super().requires_grad_(False)

    def forward(self, x):
        return extract_features(x, self)


def extract_features(x, e):
    """The four tapped relu feature maps of ``x``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != e.channels:
        raise DimensionError(f"Extractor expects B×{e.channels}×H×W input, got {x.shape}")
    if min(x.shape[2], x.shape[3]) < MIN_INPUT_SIZE:
        raise DimensionError(
            f"Input {x.shape[2]}×{x.shape[3]} is smaller than the extractor's "
            f"minimum {MIN_INPUT_SIZE}×{MIN_INPUT_SIZE}"
        )
    e.calls += 1
    taps = []
    h = x
    for conv in (e.conv1, e.conv2, e.conv3, e.conv4):
        h = relu(conv(h))
        taps.append(h)
    return taps


def gram_matrix(h):
    """
    G = F·Fᵀ / (C·H·W) with F the C×(H·W) reshaping of ``h``. Accepts a
    single C×H×W map or a batch B×C×H×W (returns B×C×C).
    """
    h = as_tensor(h)
    if h.ndim not in (3, 4):
        raise DimensionError(f"gram_matrix needs C×H×W or B×C×H×W, got {h.shape}")
    channels, height, width = h.shape[-3:]
    lead = h.shape[:-3]
    features = h.reshape(*lead, channels, height * width)
    gram = matmul(features, features.transpose(*range(len(lead)), len(lead) + 1, len(lead)))
    return gram * (1.0 / (channels * height * width))


@dataclass
class GramSet:
    """Per-tap Gram matrices of one image."""

    matrices: list = field(default_factory=list)

    @classmethod
    def from_image(cls, x, e):
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[0] != 1:
            raise DimensionError(f"GramSet.from_image takes one image, got {x.shape}")
        with no_grad():
            taps = extract_features(x, e)
            return cls([gram_matrix(h).data[0] for h in taps])

    def __len__(self):
        return len(self.matrices)

    def max_asymmetry(self):
        return max(float(np.abs(m - m.T).max()) for m in self.matrices)


def _target_grams(target, x_hat, e):
    """Per-tap target Gram arrays shaped (1 or B)×C_j×C_j."""
    if isinstance(target, GramSet):
        return [m[None] for m in target.matrices]
    if isinstance(target, (list, tuple)) and target and isinstance(target[0], GramSet):
        if len(target) != x_hat.shape[0]:
            raise DimensionError(
                f"{len(target)} paired targets for a batch of {x_hat.shape[0]}"
            )
        return [np.stack(mats) for mats in zip(*(t.matrices for t in target))]

    target = as_tensor(target)
    if target.ndim != 4 or target.shape[1:] != x_hat.shape[1:]:
        raise DimensionError(
            f"Target {target.shape} does not match augmented images {x_hat.shape}"
        )
    if target.shape[0] not in (1, x_hat.shape[0]):
        raise DimensionError(f"Target batch {target.shape[0]} must be 1 or {x_hat.shape[0]}")
    with no_grad():
        return [gram_matrix(h).data for h in extract_features(target.detach(), e)]


def style_loss(x_hat, x_t, e):
    """
    Mean over the batch of Σ_j ‖G_j(x̂_i) − G_j(target_i)‖²_F.

    ``x_t`` is a target image (1×C×H×W, shared by the batch, or B×C×H×W,
    paired per sample), a GramSet, or a list of B GramSets.
    """
    x_hat = as_tensor(x_hat)
    targets = _target_grams(x_t, x_hat, e)
    total = None
    for h, target_gram in zip(extract_features(x_hat, e), targets):
        diff = gram_matrix(h) - target_gram
        per_sample = (diff * diff).sum(axis=(1, 2))
        total = per_sample if total is None else total + per_sample
    loss = total.mean()
    logger.debug(f"style loss {loss.item():.6g} over {x_hat.shape[0]} samples")
    return loss
