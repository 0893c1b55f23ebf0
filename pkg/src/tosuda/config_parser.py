from .augment import AugmentConfig
from .data import DomainStyle
from .errors import ConfigError
from .logger import logger
from .trainer import ABLATIONS, TARGET_PAIRINGS, TrainConfig
from .utils.common import get_config_filepath, parse_float, parse_float_list, parse_int

DEFAULTS_FILE = "default_run.conf"


def _text(raw):
    return raw


def _choice(*options):
    def parse(raw):
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {raw!r}")
        return raw

    return parse


def _int(minimum):
    def parse(raw):
        value = parse_int(raw)
        if value < minimum:
            raise ValueError(f"must be >= {minimum}, got {value}")
        return value

    return parse


def _float(minimum=None, below=None):
    def parse(raw):
        value = parse_float(raw)
        if minimum is not None and value < minimum:
            raise ValueError(f"must be >= {minimum}, got {value}")
        if below is not None and value >= below:
            raise ValueError(f"must be < {below}, got {value}")
        return value

    return parse


def _optional_float_list(raw):
    return parse_float_list(raw) if raw else None


def _optional_float(raw):
    return parse_float(raw) if raw else None


def _int_list(raw):
    values = [parse_int(part.strip()) for part in raw.split(",")]
    if any(v < 0 for v in values):
        raise ValueError(f"seeds must be >= 0, got {raw}")
    return values


# every key a run config may set, with its parser
KEYS = {
    "dataset": _choice("synthetic", "idx"),
    "data_dir": _text,
    "source_images": _text,
    "source_labels": _text,
    "source_test_images": _text,
    "source_test_labels": _text,
    "target_images": _text,
    "target_labels": _text,
    "num_classes": _int(2),
    "channels": _int(1),
    "per_class": _int(1),
    "test_per_class": _int(1),
    "style_color_scale": _optional_float_list,
    "style_color_shift": _optional_float_list,
    "style_rotation_deg": _optional_float,
    "n": _int(1),
    "lambda_style": _float(0.0),
    "lambda_adv": _float(0.0),
    "lr_cls": _float(0.0),
    "lr_aug": _float(0.0),
    "momentum": _float(0.0, below=1.0),
    "batch_size": _int(1),
    "epochs": _int(0),
    "pretrain_epochs": _int(0),
    "seed": _int(0),
    "num_targets": _int(1),
    "target_pairing": _choice(*TARGET_PAIRINGS),
    "ablation": _choice(*ABLATIONS),
    "ablation_seeds": _int_list,
    "g_c": _float(0.0),
    "g_geo": _float(0.0),
    "noise_dim": _int(1),
    "hidden_width": _int(1),
    "hidden_layers": _int(1),
    "extractor_seed": _int(0),
    "extractor_weights": _text,
    "eval_batch_size": _int(1),
}

TRAIN_KEYS = (
    "n",
    "lambda_style",
    "lambda_adv",
    "lr_cls",
    "lr_aug",
    "momentum",
    "batch_size",
    "epochs",
    "pretrain_epochs",
    "seed",
    "num_targets",
    "target_pairing",
    "ablation",
    "eval_batch_size",
)
AUGMENT_KEYS = ("g_c", "g_geo", "noise_dim", "hidden_width", "hidden_layers")


def read_config_lines(config_file):
    """
    Parse ``key = value`` lines. Yields (line number, key, raw value);
    blank lines and ``#`` comment lines are skipped.
    """
    try:
        f = open(config_file, "rt")
    except FileNotFoundError:
        raise ConfigError("config file not found", path=config_file)
    with f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {line!r}", config_file, lineno)
            key, raw = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError("missing key before '='", config_file, lineno)
            yield lineno, key, raw


class RunConfig(dict):
    """
    Flat run configuration. The shipped defaults are read first, then
    ``config_file`` overrides them key by key, then ``overrides`` (already
    typed values, e.g. ``--seed``) override both.
    """

    def __init__(self, config_file=None, overrides=None):
        super().__init__()
        defaults_file = get_config_filepath(DEFAULTS_FILE)
        logger.debug(f"Reading run defaults from {defaults_file}")
        self._read(defaults_file)
        missing = sorted(set(KEYS) - set(self))
        if missing:
            raise ConfigError(f"defaults do not cover {missing}", path=defaults_file)

        self.source_file = str(config_file) if config_file is not None else None
        if config_file is not None:
            logger.info(f"Reading run config from {config_file}")
            self._read(config_file)

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            logger.info(f"Overriding {key}={value}")
            self[key] = value

        self._check(config_file)

    def _read(self, config_file):
        seen = set()
        for lineno, key, raw in read_config_lines(config_file):
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}", config_file, lineno)
            if key in seen:
                raise ConfigError(f"duplicate key {key!r}", config_file, lineno)
            seen.add(key)
            try:
                self[key] = KEYS[key](raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}", config_file, lineno)
        logger.debug(f"{config_file}: {sorted(seen)}")

    def _check(self, config_file):
        if self["dataset"] == "idx":
            for key in ("source_images", "source_labels", "target_images", "target_labels"):
                if not self[key]:
                    raise ConfigError(f"dataset = idx needs {key}", path=config_file)
            if bool(self["source_test_images"]) != bool(self["source_test_labels"]):
                raise ConfigError(
                    "source_test_images and source_test_labels must be set together",
                    path=config_file,
                )
        for key in ("style_color_scale", "style_color_shift"):
            if self[key] is not None and len(self[key]) != self["channels"]:
                raise ConfigError(
                    f"{key} has {len(self[key])} entries for {self['channels']} channels",
                    path=config_file,
                )

    def train_config(self):
        try:
            return TrainConfig(**{key: self[key] for key in TRAIN_KEYS})
        except ConfigError as e:
            raise ConfigError(str(e), path=self.source_file)

    def augment_config(self):
        return AugmentConfig(**{key: self[key] for key in AUGMENT_KEYS})

    def domain_style(self):
        """The synthetic target style: shipped defaults overlaid with ``style_*`` keys."""
        style = DomainStyle.default()
        channels = self["channels"]
        scale = self["style_color_scale"] or list(style.color_scale)[:channels]
        shift = self["style_color_shift"] or list(style.color_shift)[:channels]
        rotation = self["style_rotation_deg"]
        return DomainStyle(
            tuple(scale),
            tuple(shift),
            style.rotation_deg if rotation is None else rotation,
        )
