"""
Datasets for adaptation runs.

- a synthetic two-domain benchmark of five glyph classes, where the target
  domain is the source rendered through a fixed ``DomainStyle``
- IDX digit files (MNIST/USPS layout)
- seeded per-epoch batching
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .augment import IDENTITY_AFFINE, apply_affine
from .errors import ContractError, FormatError
from .logger import logger
from .tensor import Tensor, base_grid, bilinear_sample, no_grad
from .utils.common import get_config_filepath, one_hot

GLYPHS = ("square", "disk", "triangle", "cross", "ring")
IMAGE_SIZE = 32
GLYPH_RADIUS = 9.0
SUPERSAMPLE = 4
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# independent random streams derived from one run seed
SOURCE_STREAM = 0
TARGET_STREAM = 1
SOURCE_TEST_STREAM = 2
TARGET_ORDER_STREAM = 3


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.images.shape[0] if self.images.ndim else 0} images "
                f"for {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ContractError(f"Labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("Image values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def channels(self):
        return self.images.shape[1]

    def subset(self, indices):
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class DomainStyle:
    """Per-channel colour scale/shift followed by a rotation about the centre."""

    color_scale: tuple
    color_shift: tuple
    rotation_deg: float = 0.0

    @classmethod
    def default(cls):
        with open(get_config_filepath("synthetic_domain_style.json"), "rt") as f:
            style = json.load(f)
        return cls(
            tuple(style["color_scale"]),
            tuple(style["color_shift"]),
            float(style["rotation_deg"]),
        )

    def affine_residual(self):
        """A such that A + I is the sampling matrix of the rotation."""
        theta = np.deg2rad(self.rotation_deg)
        rotation = np.array(
            [[np.cos(theta), -np.sin(theta), 0.0], [np.sin(theta), np.cos(theta), 0.0]]
        )
        return rotation - IDENTITY_AFFINE

    def within_gains(self, g_c, g_geo):
        scale = np.asarray(self.color_scale)
        shift = np.asarray(self.color_shift)
        return bool(
            np.all(np.abs(scale - 1.0) <= g_c)
            and np.all(np.abs(shift) <= g_c)
            and np.all(np.abs(self.affine_residual()) <= g_geo)
        )

    def apply(self, images):
        images = np.asarray(images, dtype=np.float64)
        channels = images.shape[1]
        if len(self.color_scale) != channels or len(self.color_shift) != channels:
            raise ContractError(
                f"DomainStyle has {len(self.color_scale)} channels, images have {channels}"
            )
        scale = np.asarray(self.color_scale)[None, :, None, None]
        shift = np.asarray(self.color_shift)[None, :, None, None]
        styled = np.clip(images * scale + shift, 0.0, 1.0)
        if self.rotation_deg:
            A = np.broadcast_to(self.affine_residual(), (images.shape[0], 2, 3))
            with no_grad():
                styled = apply_affine(Tensor(styled), Tensor(A)).data
        return np.clip(styled, 0.0, 1.0)


def glyph_rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def render_glyph(label, rng, channels=3, size=IMAGE_SIZE):
    """
    One glyph at intensity 1.0 on a black canvas, jittered ±2 px and ±10 %.
    Edge pixels hold their fractional coverage of the shape.
    """
    dx, dy = rng.integers(-2, 3, size=2)
    radius = GLYPH_RADIUS * rng.uniform(0.9, 1.1)
    cx = (size - 1) / 2.0 + dx
    cy = (size - 1) / 2.0 + dy
    # SUPERSAMPLE² sample points per pixel, in pixel-centre coordinates
    offsets = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    ax, ay = np.abs(xx - cx), np.abs(yy - cy)
    dist = np.hypot(xx - cx, yy - cy)

    glyph = GLYPHS[label]
    if glyph == "square":
        mask = (ax <= radius) & (ay <= radius)
    elif glyph == "disk":
        mask = dist <= radius
    elif glyph == "triangle":
        top = cy - radius
        mask = (yy >= top) & (yy <= cy + radius) & (ax <= (yy - top) / 2.0)
    elif glyph == "cross":
        arm = radius / 3.0
        mask = ((ax <= arm) & (ay <= radius)) | ((ay <= arm) & (ax <= radius))
    else:
        mask = (dist <= radius) & (dist >= 0.55 * radius)

    coverage = mask.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return np.repeat(coverage[None], channels, axis=0)


def render_glyph_set(rng, per_class, channels=3):
    labels = rng.permutation(np.repeat(np.arange(len(GLYPHS)), per_class))
    images = np.stack([render_glyph(label, rng, channels) for label in labels])
    return LabeledImageSet(images, labels, len(GLYPHS))


def gen_synthetic_pair(seed, per_class, style=None, channels=3):
    """
    Source glyphs in the identity style and target glyphs (an independent
    stream) rendered through ``style``. Both sets are shuffled.
    """
    if per_class < 1:
        raise ContractError(f"per_class must be >= 1, got {per_class}")
    style = style or DomainStyle.default()
    source = render_glyph_set(glyph_rng(seed, SOURCE_STREAM), per_class, channels)
    glyphs = render_glyph_set(glyph_rng(seed, TARGET_STREAM), per_class, channels)
    target = LabeledImageSet(style.apply(glyphs.images), glyphs.labels, glyphs.num_classes)
    logger.info(
        f"Generated synthetic pair: {len(source)} source and {len(target)} target images"
    )
    return source, target


def gen_synthetic_test_set(seed, per_class, channels=3):
    """Held-out source-domain glyphs for source accuracy."""
    return render_glyph_set(glyph_rng(seed, SOURCE_TEST_STREAM), per_class, channels)


def resize_bilinear(images, size):
    """Align-corners bilinear resize of B×C×H×W images to size×size."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[2:] == (size, size):
        return images
    coords = np.broadcast_to(base_grid(size, size)[..., :2], (images.shape[0], size, size, 2))
    with no_grad():
        return bilinear_sample(Tensor(images), Tensor(coords)).data


def _read_idx(path, expected_magic):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) - header_len != count:
        raise FormatError(
            f"{path}: expected {count} data bytes for dimensions {dims}, "
            f"found {len(raw) - header_len}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def read_idx_images(path):
    """IDX image file as M×1×H×W floats in [0, 1] (before any resizing)."""
    pixels = _read_idx(path, IDX_IMAGE_MAGIC)
    return pixels[:, None, :, :].astype(np.float64) / 255.0


def read_idx_labels(path):
    return _read_idx(path, IDX_LABEL_MAGIC).astype(np.int64)


def load_idx(images_path, labels_path, channels=1, size=IMAGE_SIZE, num_classes=10):
    logger.info(f"Reading IDX images from {images_path}")
    images = read_idx_images(images_path)
    logger.info(f"Reading IDX labels from {labels_path}")
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    if len(images):
        chunks = [
            resize_bilinear(images[i : i + 1024], size) for i in range(0, len(images), 1024)
        ]
        resized = np.clip(np.concatenate(chunks), 0.0, 1.0)
    else:
        resized = np.zeros((0, 1, size, size))
    if channels > 1:
        resized = np.repeat(resized, channels, axis=1)
    return LabeledImageSet(resized, labels, num_classes)


def resolve_data_path(path, data_dir=None):
    """Relative paths resolve against ``data_dir``, then $TOSUDA_DATA_DIR."""
    if os.path.isabs(path):
        return path
    root = data_dir or os.environ.get("TOSUDA_DATA_DIR") or os.getcwd()
    return os.path.join(root, path)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    onehot: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


def batches(image_set, batch_size, seed, epoch):
    """Batches of a per-(seed, epoch) permutation; the final short batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(image_set))
    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        labels = image_set.labels[indices]
        yield Batch(
            image_set.images[indices],
            labels,
            one_hot(labels, image_set.num_classes),
            indices,
        )


@dataclass
class DomainData:
    source_train: LabeledImageSet
    source_test: LabeledImageSet
    target_shots: np.ndarray
    target_test: LabeledImageSet


def split_targets(target, num_targets, seed=None):
    """
    The first ``num_targets`` target images (after an optional seeded shuffle)
    become the unlabeled training targets; the rest is held out.
    """
    if num_targets < 1 or num_targets >= len(target):
        raise ContractError(
            f"num_targets must lie in [1, {len(target) - 1}], got {num_targets}"
        )
    if seed is not None:
        target = target.subset(glyph_rng(seed, TARGET_ORDER_STREAM).permutation(len(target)))
    shots = target.images[:num_targets].copy()
    held_out = target.subset(np.arange(num_targets, len(target)))
    return shots, held_out


def prepare_domains(run_config, seed):
    """Load or generate the four sets a run needs, according to ``run_config``."""
    channels = run_config["channels"]
    if run_config["dataset"] == "synthetic":
        style = run_config.domain_style()
        if len(style.color_scale) != channels:
            raise ContractError(
                f"style_color_scale has {len(style.color_scale)} entries for {channels} channels"
            )
        source, target = gen_synthetic_pair(seed, run_config["per_class"], style, channels)
        source_test = gen_synthetic_test_set(seed, run_config["test_per_class"], channels)
        shots, target_test = split_targets(target, run_config["num_targets"])
    else:
        data_dir = run_config["data_dir"]

        def _load(images_key, labels_key):
            return load_idx(
                resolve_data_path(run_config[images_key], data_dir),
                resolve_data_path(run_config[labels_key], data_dir),
                channels=channels,
                num_classes=run_config["num_classes"],
            )

        source = _load("source_images", "source_labels")
        target = _load("target_images", "target_labels")
        if run_config["source_test_images"]:
            source_test = _load("source_test_images", "source_test_labels")
        else:
            logger.warning("No source test split configured; source_acc uses the training set")
            source_test = source
        shots, target_test = split_targets(target, run_config["num_targets"], seed=seed)

    logger.info(
        f"{len(source)} source, {len(source_test)} source-test, {len(shots)} target "
        f"shot(s), {len(target_test)} held-out target images"
    )
    return DomainData(source, source_test, shots, target_test)
