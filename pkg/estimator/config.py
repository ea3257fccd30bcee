"""
Pipeline configuration.

Values resolve as: Django settings defaults, then a key=value config file,
then command-line overrides. The result is validated by
PipelineConfigSerializer and frozen into a PipelineConfig.
"""
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional

from django.conf import settings

from .exceptions import ConfigError
from .serializers import PipelineConfigSerializer

logger = logging.getLogger(__name__)

SETTINGS_GROUPS = ("PIPELINE_CONFIG", "DETECTOR_CONFIG", "TRAIN_CONFIG", "AUGMENT_CONFIG", "PREPROCESS_CONFIG")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    dataset_root: str = "data"
    output_dir: str = "runs/default"
    backbone_weights: str = ""
    detector_weights: str = ""
    width_divisor: int = 1
    min_face: float = 20.0
    pyramid_factor: float = 0.709
    pnet_threshold: float = 0.6
    rnet_threshold: float = 0.7
    onet_threshold: float = 0.7
    chip_size: int = 256
    detect_on_predict: bool = False
    split_ratio: float = 0.8
    rotation_degrees: float = 10.0
    flip_probability: float = 0.5
    mean_r: float = 131.1
    mean_g: float = 103.9
    mean_b: float = 91.6
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_rate: float = 0.3
    checkpoint_every: int = 0

    @property
    def mean(self):
        return (self.mean_r, self.mean_g, self.mean_b)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


CONFIG_KEYS = tuple(f.name for f in fields(PipelineConfig))


def settings_defaults() -> Dict[str, object]:
    """Field defaults overlaid with the grouped settings dicts."""
    values = {f.name: f.default for f in fields(PipelineConfig)}
    for group in SETTINGS_GROUPS:
        for key, value in getattr(settings, group, {}).items():
            if key in values:
                values[key] = value
    return values


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Read `key=value` lines. Blank lines and lines starting with # are ignored;
    unknown keys are an error.
    """
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{number}: unknown config key {key!r}")
        values[key] = value
    return values


def read_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def validate_config(values: Mapping[str, object]) -> PipelineConfig:
    serializer = PipelineConfigSerializer(data=dict(values))
    if not serializer.is_valid():
        details = "; ".join(f"{key}: {' '.join(str(m) for m in msgs)}" for key, msgs in serializer.errors.items())
        raise ConfigError(f"Invalid configuration: {details}", serializer.errors)
    return PipelineConfig(**serializer.validated_data)


def resolve_config(
    config_file: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> PipelineConfig:
    values = settings_defaults()
    if config_file:
        values.update(read_config_file(config_file))
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"Unknown config key {key!r}")
        if value is not None:
            values[key] = value
    return validate_config(values)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    """One `key=value` line per field in declaration order."""
    return "".join(f"{f.name}={_format_value(getattr(config, f.name))}\n" for f in fields(config))


def parse_config(text: str) -> PipelineConfig:
    """Inverse of dump_config: parse_config(dump_config(c)) == c."""
    values = settings_defaults()
    values.update(parse_config_text(text))
    return validate_config(values)
