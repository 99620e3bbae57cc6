"""Configuration management for SS-GAN training runs.

A run is described by a flat ``key = value`` text file whose keys mirror the
fields of :class:`TrainConfig`. Values from the file can be overridden by
command-line flags; the resolved configuration is always snapshotted next to
the run so it can be reproduced or resumed.
"""

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv


class SSGANError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SSGANError):
    """Raised when a configuration file or value is invalid."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


VARIANTS = ("uncond", "ssgan", "ssgan_sbn", "cond", "rot_only")
REGULARIZERS = ("spectral_norm", "gradient_penalty")
ALPHA_SCHEDULES = ("constant", "linear_to_zero")
EMBEDDERS = ("frozen_classifier", "pca_pixels")
PRECISIONS = ("float32", "float64")

# Config file keys that differ from the dataclass field name.
KEY_ALIASES = {"lambda": "gp_lambda"}
FIELD_KEYS = {value: key for key, value in KEY_ALIASES.items()}

MIN_FID_SAMPLES = 1000


@dataclass
class TrainConfig:
    """All scalars a training run depends on.

    Defaults: batch of 64 with 16 images rotated
    four ways, beta=1, alpha=0.2, Adam with learning rate 2e-4.
    """

    variant: str = "ssgan"
    alpha: float = 0.2
    beta: float = 1.0
    lr: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    d_steps: int = 2
    regularizer: str = "spectral_norm"
    gp_lambda: float = 0.0
    batch_size: int = 64
    n_rot_base: int = 16
    total_steps: int = 10000
    alpha_schedule: str = "constant"
    alpha_anneal_steps: int = 0
    seed: int = 0

    # Model.
    architecture: str = "resnet32"
    channel_scale: float = 1.0
    z_dim: int = 128
    image_size: int = 32
    precision: str = "float32"

    # Data.
    dataset: str = "shapes"
    dataset_size: int = 20000
    test_size: int = 10000
    num_classes: int = 10

    # Cadence and evaluation.
    log_every: int = 50
    eval_every: int = 0
    checkpoint_every: int = 0
    fid_samples: int = 10000
    embedder: str = "frozen_classifier"
    embedder_path: str = ""
    probe_eval: bool = True
    probe_epochs: int = 50
    probe_train_size: int = 5000
    probe_test_size: int = 2000
    record_wall_time: bool = False
    threads: int = 1

    def effective_weights(self) -> Tuple[float, float]:
        """
        Return the (alpha, beta) pair actually used by the variant.

        Returns:
            Tuple of rotation-loss weights for generator and discriminator
        """
        if self.variant in ("uncond", "cond"):
            return 0.0, 0.0
        if self.variant == "rot_only":
            return 0.0, self.beta
        return self.alpha, self.beta

    @property
    def resolved_eval_every(self) -> int:
        if self.eval_every > 0:
            return self.eval_every
        return max(1, self.total_steps // 20)

    @property
    def resolved_checkpoint_every(self) -> int:
        if self.checkpoint_every > 0:
            return self.checkpoint_every
        return self.resolved_eval_every

    @property
    def generator_mode(self) -> str:
        if self.variant == "ssgan_sbn":
            return "self_modulated_bn"
        if self.variant == "cond":
            return "conditional_bn"
        return "plain"

    @property
    def conditional(self) -> bool:
        return self.variant == "cond"

    def validate(self) -> "TrainConfig":
        """
        Check field ranges and cross-field constraints.

        Returns:
            The config itself, for chaining

        Raises:
            ConfigError: If any field is out of range
        """
        _check(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        _check(self.regularizer in REGULARIZERS, "regularizer", f"must be one of {REGULARIZERS}")
        _check(self.alpha_schedule in ALPHA_SCHEDULES, "alpha_schedule",
               f"must be one of {ALPHA_SCHEDULES}")
        _check(self.embedder in EMBEDDERS, "embedder", f"must be one of {EMBEDDERS}")
        _check(self.precision in PRECISIONS, "precision", f"must be one of {PRECISIONS}")
        _check(self.alpha >= 0, "alpha", "must be >= 0")
        _check(self.beta >= 0, "beta", "must be >= 0")
        _check(self.lr > 0, "lr", "must be > 0")
        _check(0 <= self.adam_beta1 < 1, "adam_beta1", "must lie in [0, 1)")
        _check(0 <= self.adam_beta2 < 1, "adam_beta2", "must lie in [0, 1)")
        _check(self.d_steps >= 1, "d_steps", "must be >= 1")
        _check(self.gp_lambda >= 0, "gp_lambda", "must be >= 0")
        if self.regularizer == "gradient_penalty":
            _check(self.gp_lambda > 0, "gp_lambda", "must be > 0 with gradient_penalty")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(1 <= self.n_rot_base <= self.batch_size, "n_rot_base",
               "must lie in [1, batch_size]")
        _check(self.total_steps >= 0, "total_steps", "must be >= 0")
        if self.alpha_schedule == "linear_to_zero":
            _check(self.alpha_anneal_steps > 0, "alpha_anneal_steps",
                   "must be > 0 with linear_to_zero")
        _check(self.seed >= 0, "seed", "must be >= 0")
        _check(self.channel_scale > 0, "channel_scale", "must be > 0")
        _check(self.z_dim >= 1, "z_dim", "must be >= 1")
        _check(self.image_size in (16, 32, 64, 128), "image_size", "must be 16, 32, 64 or 128")
        _check(self.dataset_size >= 1, "dataset_size", "must be >= 1")
        _check(self.test_size >= 2, "test_size", "must be >= 2")
        _check(self.num_classes >= 0, "num_classes", "must be >= 0")
        if self.variant == "cond":
            _check(self.num_classes > 0, "variant", "cond requires a labeled dataset")
        _check(self.log_every >= 1, "log_every", "must be >= 1")
        _check(self.eval_every >= 0, "eval_every", "must be >= 0")
        _check(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        _check(self.fid_samples >= MIN_FID_SAMPLES, "fid_samples",
               f"must be >= {MIN_FID_SAMPLES}")
        _check(self.probe_epochs >= 1, "probe_epochs", "must be >= 1")
        _check(self.threads >= 1, "threads", "must be >= 1")
        return self


def _check(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{FIELD_KEYS.get(key, key)}: {message}", key=key)


def _field_types() -> Dict[str, Any]:
    return {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: Any, kind: Any) -> Any:
    """Convert a raw text value into the field's declared type."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{FIELD_KEYS.get(key, key)}: cannot parse {raw!r}", key=key)
    return text


def config_from_mapping(values: Mapping[str, Any], base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Build a validated config from a flat key/value mapping.

    Args:
        values: Keys as they appear in config files (``lambda`` allowed)
        base: Config whose values are used for keys not present

    Returns:
        Validated TrainConfig

    Raises:
        ConfigError: On unknown keys or unparsable values
    """
    types = _field_types()
    resolved = dataclasses.asdict(base or TrainConfig())
    for key, raw in values.items():
        name = KEY_ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown config key: {key}", key=key)
        if raw is None:
            raise ConfigError(f"{key}: missing value", key=key)
        resolved[name] = _coerce(name, raw, types[name])
    return TrainConfig(**resolved).validate()


def apply_overrides(config: TrainConfig, overrides: Mapping[str, Any]) -> TrainConfig:
    """Return a copy of config with flag or grid-cell overrides applied."""
    return config_from_mapping(overrides, base=config)


def load_config(path: str, overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """
    Load a ``key = value`` config file and apply flag overrides.

    Args:
        path: Path to the config file
        overrides: Flag values that take precedence over file keys

    Returns:
        Validated TrainConfig

    Raises:
        ConfigError: If the file is missing or contains invalid entries
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: Dict[str, Any] = dict(dotenv_values(path, interpolate=False, encoding="utf-8"))
    values.update(overrides or {})
    return config_from_mapping(values)


def dump_config(config: TrainConfig) -> str:
    """
    Render a config in the same flat format it is loaded from.

    Args:
        config: Config to render

    Returns:
        UTF-8 text, one ``key = value`` line per field
    """
    lines: List[str] = []
    for name, value in dataclasses.asdict(config).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{FIELD_KEYS.get(name, name)} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: TrainConfig) -> str:
    """Short stable hash identifying a resolved config."""
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()[:16]


def output_root(override: Optional[str] = None) -> Path:
    """
    Resolve the directory runs are written under.

    Args:
        override: Explicit directory (wins over the environment)

    Returns:
        Output root path (default: ./runs)
    """
    load_dotenv()
    return Path(override or os.getenv("SSGAN_OUT", "runs"))


def get_default_config() -> TrainConfig:
    """
    Get default training configuration.

    Returns:
        TrainConfig instance with default settings
    """
    return TrainConfig().validate()
