"""Configuration management module for YAML config files and CLI overrides.

Copyright (C) 2024 fpt-plus Contributors

This program is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

This program is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see <https://www.gnu.org/licenses/>.

This module handles loading configuration from YAML files, merging with
command-line ``--set`` overrides, and validating the resulting architecture.

Configuration Hierarchy:
-----------------------
1. Default values (defined in dataclasses)
2. YAML configuration file values (override defaults)
3. Command-line ``--set section.key=value`` (override both)

Configuration Structure:
-----------------------
- lpm: frozen backbone geometry (resolution, patch, depth, width, heads)
- side: side network (depth, reduction factor, prompts, token ratio, input resolution)
- train: optimizer and schedule
- data: class count and pixel normalization

Keys may be nested under their section or written flat as dotted keys
(``side.prompts: 32``). Unknown sections or keys are errors.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, Optional

import yaml

from .adapter import FptConfig
from .errors import ConfigError
from .train import TrainConfig
from .vit import ViTConfig


logger = logging.getLogger(__name__)


@dataclass
class LpmSection:
    """Frozen backbone geometry."""
    high_res: int = 512
    patch_size: int = 16
    layers: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    channels: int = 3
    class_token: bool = True
    positional: bool = True


@dataclass
class SideSection:
    """Side network and fusion settings."""
    layers: int = 6
    reduction: int = 8
    prompts: int = 16
    token_ratio: float = 0.2
    low_res: int = 128
    heads: int = 0
    selection: str = "important"
    selection_seed: int = 0
    fusion: bool = True


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 16
    lr_max: float = 0.001
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True


@dataclass
class DataSection:
    classes: int = 2
    norm_mean: float = 0.5
    norm_std: float = 0.5


@dataclass
class AppConfig:
    """Combined application configuration."""
    lpm: LpmSection = field(default_factory=LpmSection)
    side: SideSection = field(default_factory=SideSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)


SECTIONS = ("lpm", "side", "train", "data")
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, value: Any, kind: type) -> Any:
    """Convert ``value`` to the field type ``kind``."""
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


class Config:
    """Manages configuration from YAML files and command-line overrides."""

    def __init__(self):
        """Initialize default configuration."""
        self.config = AppConfig()

    def load_from_file(self, path: str) -> None:
        """Load configuration from a YAML file.

        A file that is not a YAML mapping is read as flat ``section.key=value``
        lines; blank lines and ``#`` comments are skipped.

        Args:
            path: Path to configuration file

        Raises:
            FileNotFoundError: If config file doesn't exist
            ConfigError: If the syntax is invalid or a key is unknown
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Configuration file not found: {path}")

        with open(path, 'r') as f:
            text = f.read()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            # Extract line number if available
            if hasattr(e, 'problem_mark'):
                mark = e.problem_mark
                raise ConfigError(
                    f"Invalid YAML syntax at line {mark.line + 1}, column {mark.column + 1}: {e.problem}"
                ) from e
            raise ConfigError(f"Invalid YAML syntax: {e}") from e

        if data is None:
            return
        if isinstance(data, dict):
            self.merge(data)
            return

        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(
                    f"{path}: line {number} is neither a YAML mapping nor section.key=value: {line!r}"
                )
            self.merge_with_cli_args([line])

    def merge(self, data: Dict[str, Any]) -> None:
        """Apply nested (``{section: {key: value}}``) or dotted (``{'section.key': value}``) settings."""
        for key, value in data.items():
            if isinstance(value, dict):
                if key not in SECTIONS:
                    raise ConfigError(f"Unknown configuration section: {key}")
                for sub, sub_value in value.items():
                    self.set(f"{key}.{sub}", sub_value)
            else:
                self.set(str(key), value)

    def set(self, key: str, value: Any) -> None:
        """Set one dotted key, coercing to the field type.

        Raises:
            ConfigError: If the key is unknown or the value does not convert
        """
        parts = key.split('.')
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"Unknown configuration key: {key}")
        section_name, name = parts
        section = getattr(self.config, section_name)
        kinds = {f.name: f.type for f in fields(section)}
        if name not in kinds:
            raise ConfigError(f"Unknown configuration key: {key}")
        kind = kinds[name]
        if isinstance(kind, str):
            kind = {"int": int, "float": float, "bool": bool, "str": str}[kind]
        setattr(section, name, _coerce(key, value, kind))

    def merge_with_cli_args(self, overrides: Optional[Iterable[str]]) -> None:
        """Apply ``section.key=value`` overrides from the command line.

        CLI overrides take precedence over config file values.
        """
        for item in overrides or ():
            if '=' not in item:
                raise ConfigError(f"Override must look like section.key=value, got {item!r}")
            key, value = item.split('=', 1)
            self.set(key.strip(), yaml.safe_load(value) if value.strip() else value)

    def fpt_config(self) -> FptConfig:
        """Architecture described by the lpm, side and data sections."""
        lpm, side = self.config.lpm, self.config.side
        try:
            vit = ViTConfig(
                image_size=lpm.high_res, patch_size=lpm.patch_size, layers=lpm.layers,
                dim=lpm.dim, heads=lpm.heads, mlp_ratio=lpm.mlp_ratio, channels=lpm.channels,
                with_class_token=lpm.class_token, positional=lpm.positional,
            )
        except ValueError as e:
            raise ConfigError(f"lpm: {e}") from e
        return FptConfig(
            lpm=vit, side_layers=side.layers, reduction=side.reduction, prompts=side.prompts,
            token_ratio=side.token_ratio, low_res=side.low_res, side_heads=side.heads,
            num_classes=self.config.data.classes, selection=side.selection,
            selection_seed=side.selection_seed, fusion=side.fusion,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.config.train))

    @property
    def norm(self):
        return self.config.data.norm_mean, self.config.data.norm_std

    def validate(self) -> None:
        """Build every derived config so that all invariants are checked.

        Raises:
            ConfigError: If any invariant fails
        """
        self.fpt_config()
        self.train_config()
        if self.config.data.norm_std <= 0:
            raise ConfigError(f"data.norm_std must be positive, got {self.config.data.norm_std}")

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value by key.

        Args:
            key: Configuration key in dot notation (e.g., 'side.prompts')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        parts = key.split('.')

        if len(parts) != 2 or parts[0] not in SECTIONS:
            return default

        section, name = parts
        return getattr(getattr(self.config, section), name, default)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self.config)

    @staticmethod
    def create_default_config(path: str) -> None:
        """Create a default configuration file.

        Args:
            path: Path where config file should be created
        """
        config_dir = os.path.dirname(path)
        if config_dir:
            os.makedirs(config_dir, exist_ok=True)

        with open(path, 'w') as f:
            yaml.dump(asdict(AppConfig()), f, default_flow_style=False, sort_keys=False)
