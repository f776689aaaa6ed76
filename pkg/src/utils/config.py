import copy
import os
import logging
from typing import Dict, Any, Optional, Iterable

import yaml

from src.utils.errors import ConfigError

logger = logging.getLogger("openworld_kit.config")

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "..", "config", "default.yaml")


class ConfigLoader:
    """Layered YAML configuration.

    The shipped ``config/default.yaml`` defines every key. A user file and
    ``section.key=value`` overrides are merged on top of it; any key that is
    not present in the defaults is rejected.
    """

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Iterable[str]] = None):
        self.config_path = config_path
        self.defaults = self.load_config(DEFAULT_CONFIG_PATH)
        self.config = copy.deepcopy(self.defaults)
        if config_path is not None:
            self.merge_with(self.load_config(config_path))
        for item in overrides or ():
            self.set_override(item)

    def load_config(self, path: str) -> Dict[str, Any]:
        """Load configuration from a YAML file."""
        if not os.path.exists(path):
            raise FileNotFoundError(f"Configuration file not found at {path}")

        with open(path, 'r') as f:
            try:
                config = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"Error parsing YAML file {path}: {e}") from e
        if config is None:
            return {}
        if not isinstance(config, dict):
            raise ConfigError(f"Top level of {path} must be a mapping")
        return config

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value using dot notation (e.g., 'training.learning_rate')."""
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def set(self, key: str, value: Any):
        """Set an existing key using dot notation."""
        keys = key.split('.')
        node = self.config
        default_node = self.defaults
        for k in keys[:-1]:
            if not isinstance(default_node, dict) or k not in default_node:
                raise ConfigError(f"Unknown configuration key: {key}")
            node = node[k]
            default_node = default_node[k]
        leaf = keys[-1]
        if not isinstance(default_node, dict) or leaf not in default_node:
            raise ConfigError(f"Unknown configuration key: {key}")
        node[leaf] = _coerce(value, default_node[leaf], key)

    def set_override(self, item: str):
        """Apply a ``section.key=value`` override; the value is parsed as YAML."""
        if '=' not in item:
            raise ConfigError(f"Override must look like section.key=value, got {item!r}")
        key, raw = item.split('=', 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse override value for {key}: {e}") from e
        self.set(key.strip(), value)

    def merge_with(self, other_config: Dict[str, Any]):
        """Merge another configuration dictionary into the current one."""
        self._deep_merge(self.config, other_config, self.defaults, prefix="")

    def _deep_merge(self, source: Dict[str, Any], destination: Dict[str, Any],
                    defaults: Dict[str, Any], prefix: str):
        """Recursively merge two dictionaries, rejecting keys the defaults do not define."""
        for key, value in destination.items():
            dotted = f"{prefix}{key}"
            if key not in defaults:
                raise ConfigError(f"Unknown configuration key: {dotted}")
            if isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Configuration key {dotted} must be a mapping")
                self._deep_merge(source[key], value, defaults[key], prefix=f"{dotted}.")
            else:
                source[key] = _coerce(value, defaults[key], dotted)

    def resolved(self) -> Dict[str, Any]:
        """Fully merged configuration, safe to serialize."""
        return copy.deepcopy(self.config)


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Match the type of the shipped default so `1e-4` style overrides stay numeric."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key} expects a number, got {value!r}") from e
    if isinstance(default, int):
        try:
            number = float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key} expects an integer, got {value!r}") from e
        if not number.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(number)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list, got {value!r}")
    return value


# Singleton instance for easy access
_config_instance = None


def get_config(config_path: Optional[str] = None, overrides: Optional[Iterable[str]] = None) -> ConfigLoader:
    global _config_instance
    if _config_instance is None or config_path is not None or overrides:
        _config_instance = ConfigLoader(config_path, overrides)
    return _config_instance


def reset_config():
    global _config_instance
    _config_instance = None
