"""
Training configuration.

Config files hold flat "key = value" lines; "#" starts a comment. Every field of
TrainConfig can also be given on the command line as --<field-name>, which wins
over the file. Tuples are comma-separated lists.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, fields

from collabdet.consistency import ConsistencyConfig
from collabdet.errors import ConfigurationError

logger = logging.getLogger(__name__)

MODES = ("weak_only", "collaborative", "cascade")
TRUE_WORDS = ("true", "1", "yes", "on")
FALSE_WORDS = ("false", "0", "no", "off")


@dataclass
class TrainConfig:
    mode: str = "collaborative"
    beta: float = 0.8
    epochs: int = 20
    lr: float = 1e-3
    lr_low: float = 1e-4
    lr_step_fraction: float = 0.6
    nms_threshold: float = 0.6
    rpn_nms_threshold: float = 0.7
    rpn_pre_nms_top_k: int = 200
    max_strong_proposals: int = 32
    n_weak_proposals: int = 64
    weak_score_threshold: float = 1e-3
    score_threshold: float = 0.05
    match_threshold: float = 0.5
    normalize_consistency: bool = True
    scales: tuple = (0.75, 1.0, 1.25)
    flip: bool = True
    seed: int = 0
    dataset: str = "data"
    output: str = "runs"
    eval_every: int = 2
    weak_checkpoint: str = ""
    n_classes: int = 4
    image_size: int = 64
    n_train: int = 400
    n_test: int = 100
    channels: tuple = (8, 16, 16)
    fc_width: int = 64
    roi_bins: int = 2
    anchor_scales: tuple = (14, 24)
    check_isolation: bool = True

    @property
    def lr_switch_epoch(self):
        """First epoch index trained with lr_low."""
        return int(round(self.lr_step_fraction * self.epochs))

    def lr_for_epoch(self, epoch):
        return self.lr if epoch < self.lr_switch_epoch else self.lr_low

    def consistency(self):
        return ConsistencyConfig(self.beta, self.match_threshold, self.normalize_consistency)

    def network_meta(self):
        return {
            "n_classes": self.n_classes,
            "channels": list(self.channels),
            "fc_width": self.fc_width,
            "roi_bins": self.roi_bins,
            "anchor_scales": list(self.anchor_scales),
            "rpn_pre_nms_top_k": self.rpn_pre_nms_top_k,
            "rpn_nms_threshold": self.rpn_nms_threshold,
            "max_strong_proposals": self.max_strong_proposals,
        }

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.lr <= 0 or self.lr_low <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.lr_step_fraction <= 1.0:
            raise ConfigurationError("lr_step_fraction must lie in [0, 1]")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be at least 1")
        for name in ("nms_threshold", "rpn_nms_threshold", "match_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.n_weak_proposals < 1 or self.max_strong_proposals < 1 or self.rpn_pre_nms_top_k < 1:
            raise ConfigurationError("proposal counts must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigurationError("scales must be positive")
        if len(self.channels) < 2:
            raise ConfigurationError("channels needs at least two conv layers")
        if not self.anchor_scales:
            raise ConfigurationError("anchor_scales must not be empty")
        return self

    @classmethod
    def from_file(cls, path, overrides=None):
        values = read_config_file(path) if path else {}
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        """Build from raw strings or typed values keyed by field name."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"Unknown config key {key!r}")
            kwargs[key] = parse_value(known[key], raw)
        return cls(**kwargs).validate()


def parse_value(field, raw):
    """Convert raw (usually a string) to the type of the field's default."""
    default = field.default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else float
            return tuple(item_type(part.strip()) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"Bad value {raw!r} for {field.name}") from exc
    return text


def read_config_file(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{number}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def add_config_arguments(parser):
    """One --flag per TrainConfig field; unset flags stay None so the file value survives."""
    parser.add_argument("--config", default=None, help="Flat key = value config file")
    for f in fields(TrainConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                            help=f"default: {f.default}")


def config_from_args(args):
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = TrainConfig.from_file(args.config, overrides)
    logger.debug(f"Config: {cfg}")
    return cfg
