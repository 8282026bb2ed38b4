"""
Configuration settings for the toolkit.
"""

import math
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values


class Config:
    """Configuration class for the toolkit."""

    # Versions
    VERSION = "1.0.0"
    CHECKPOINT_FORMAT = "LSHOCR1"
    CORPUS_FORMAT = "histocr-corpus/1"

    # Logging Configuration
    LOG_LEVEL = os.getenv("HISTOCR_LOG_LEVEL", "WARNING").upper()
    LOG_DIR = os.getenv("HISTOCR_LOG_DIR") or None

    # Runtime
    DEFAULT_THREADS = 1

    # Packaged data tables
    PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
    DATA_DIR = os.path.join(PROJECT_ROOT, "data")
    DEFAULT_RULES_FILE = os.path.join(DATA_DIR, "default_rules.tsv")
    GLYPH_TABLE_FILE = os.path.join(DATA_DIR, "glyphs_5x7.txt")

    # Corpus
    DEFAULT_BALANCE_CAP = 50
    LINES_PER_SYNTH_PAGE = 25

    # Evaluation
    DEFAULT_TOP_N = 10

    @classmethod
    def validate(cls) -> bool:
        """Validate configuration settings."""
        valid_levels = {"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"}
        if cls.LOG_LEVEL not in valid_levels:
            raise ValueError(f"Invalid log level {cls.LOG_LEVEL}")
        for path in (cls.DEFAULT_RULES_FILE, cls.GLYPH_TABLE_FILE):
            if not os.path.isfile(path):
                raise ValueError(f"Packaged data file missing: {path}")
        if cls.LOG_DIR:
            os.makedirs(cls.LOG_DIR, exist_ok=True)
        return True


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a single training run; file keys are the upper-cased field names."""

    seed: int = 0
    voters: int = 5
    max_epochs: int = 100
    patience: int = 5
    # None -> ceil(epoch size / 2)
    eval_interval_samples: Optional[int] = None
    augmentations_per_sample: int = 5
    weight_decay: float = 1e-5
    ema_decay: float = 0.99
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    batch_size: int = 16
    variant_list: Tuple[str, ...] = ("bin",)

    def eval_interval(self, epoch_size: int) -> int:
        if self.eval_interval_samples:
            return self.eval_interval_samples
        return max(1, math.ceil(epoch_size / 2))

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["variant_list"] = list(self.variant_list)
        return out


def parse_variant_list(value) -> Tuple[str, ...]:
    """Accept a preset name (bin, ocro, all-var) or a comma separated variant list."""
    from imgproc import VARIANT_PRESETS

    if isinstance(value, (list, tuple)):
        items = [str(v).strip() for v in value]
    else:
        text = str(value).strip()
        if text in VARIANT_PRESETS:
            return VARIANT_PRESETS[text]
        items = [v.strip() for v in text.split(",")]
    return tuple(v for v in items if v)


def _coerce(name: str, raw: Any):
    from utils.exceptions import ConfigError

    field_types = {f.name: f.type for f in fields(TrainConfig)}
    kind = field_types[name]
    try:
        if name == "variant_list":
            return parse_variant_list(raw)
        if name == "eval_interval_samples":
            return None if str(raw).strip().lower() in ("", "none", "auto") else int(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {name.upper()}: {raw!r} ({e})")
    return raw


def load_train_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> TrainConfig:
    """Read a KEY=VALUE training config file, then apply non-None overrides."""
    from utils.exceptions import ConfigError
    from utils.validator import ConfigValidator

    values: Dict[str, Any] = {}
    known = {f.name for f in fields(TrainConfig)}
    if path is not None:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Training config not found: {path}")
        for key, raw in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f"Unknown training config key {key} in {path}")
            values[name] = _coerce(name, raw)

    for name, raw in (overrides or {}).items():
        if raw is None:
            continue
        if name not in known:
            raise ConfigError(f"Unknown training config key {name}")
        values[name] = _coerce(name, raw)

    config = TrainConfig(**values)
    ok, message = ConfigValidator.validate_train_config(config)
    if not ok:
        raise ConfigError(message)
    return config
