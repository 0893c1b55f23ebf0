import hashlib
import importlib.resources as pkg_resources
import math

import numpy as np

from .. import config
from ..errors import ContractError


def get_config_filepath(filename):
    return pkg_resources.files(config).joinpath(filename)


def parse_int(raw):
    """
    Parse a whole number from config text or a number.

    Parameters:
        raw: an int, a float with no fractional part, or a string of either.

    Returns:
        The int value. Raises ValueError for anything else.
    """
    if raw is None:
        raise ValueError("Missing integer value")

    # int(True) == 1, so a bool must not succeed
    if isinstance(raw, bool):
        raise ValueError(f"Invalid integer: {raw}")

    if isinstance(raw, int):
        return raw

    try:
        return int(raw)
    except (TypeError, ValueError):
        pass

    try:
        f = float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"Invalid integer: {raw}")

    if not f.is_integer():
        raise ValueError(f"Value must be a whole number: {raw}")

    return int(f)


def parse_float(raw):
    """A finite float; nan and inf are rejected."""
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"Value must be finite: {raw}")
    return value


def parse_float_list(raw):
    """Parse a comma-separated list of floats, e.g. ``0.9, 0.4, 0.2``."""
    if isinstance(raw, (list, tuple)):
        return [parse_float(x) for x in raw]
    parts = [p.strip() for p in str(raw).split(",")]
    if not parts or any(p == "" for p in parts):
        raise ValueError(f"Invalid list of numbers: {raw}")
    return [parse_float(p) for p in parts]


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ContractError(f"Labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"Labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_one_hot(values, name="c"):
    """Raise ContractError unless every row of ``values`` is a one-hot vector."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ContractError(f"{name} must be B×K one-hot, got shape {values.shape}")
    is_binary = np.all((values == 0.0) | (values == 1.0))
    if not is_binary or not np.all(values.sum(axis=1) == 1.0):
        raise ContractError(f"{name} rows must be one-hot")


def digest_arrays(named_arrays):
    """
    SHA-256 over (name, shape, float64 bytes) of each array, in name order.
    """
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        array = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(array.shape).encode("ascii"))
        h.update(array.tobytes())
    return h.hexdigest()
