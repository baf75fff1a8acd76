"""Configuration management for polarlink.

Implements a layered configuration system with priority:
CLI args > environment variables > config file > defaults

These are application settings (logging, chunking, analysis defaults).
Physical link parameters live in link-config files, see
``polarlink.core.link_config``.
"""

import os
from pathlib import Path
from typing import Any

import orjson
from dotenv import load_dotenv

# Default configuration values
DEFAULTS = {
    "log_level": "INFO",
    "chunk_seconds": 0.25,
    "workers": 1,
    "rate_scale": 1.0,
    "window_ps": 823.0,
    "search_range_ps": 1.2e9,
    "coarse_bin_ps": 10000.0,
    "fine_span_ps": 20000.0,
    "ec_efficiency": 1.15,
}

# Map config keys to environment variable names
ENV_MAPPINGS = {
    "log_level": "POLARLINK_LOG_LEVEL",
    "chunk_seconds": "POLARLINK_CHUNK_SECONDS",
    "workers": "POLARLINK_WORKERS",
    "rate_scale": "POLARLINK_RATE_SCALE",
    "window_ps": "POLARLINK_WINDOW_PS",
    "search_range_ps": "POLARLINK_SEARCH_RANGE_PS",
    "coarse_bin_ps": "POLARLINK_COARSE_BIN_PS",
    "fine_span_ps": "POLARLINK_FINE_SPAN_PS",
    "ec_efficiency": "POLARLINK_EC_EFFICIENCY",
}

# Short descriptions used by `polarlink help`
DESCRIPTIONS = {
    "log_level": "Logging level",
    "chunk_seconds": "Simulation chunk length in seconds",
    "workers": "Worker threads for simulation and correlation",
    "rate_scale": "Divide rates and stretch durations by this factor",
    "window_ps": "Coincidence window in ps",
    "search_range_ps": "Half-range of the coarse delay search in ps",
    "coarse_bin_ps": "Coarse delay-search bin width in ps",
    "fine_span_ps": "Half-span of the fine peak histogram in ps",
    "ec_efficiency": "Error-correction efficiency f",
}

# .env in the working directory can carry POLARLINK_* overrides
load_dotenv()


class Config:
    """Manages polarlink configuration with layered priority."""

    # Class-level constants for access from CLI
    DEFAULTS = DEFAULTS
    ENV_MAPPINGS = ENV_MAPPINGS

    def __init__(self, config_dir: Path | None = None):
        """Initialize configuration.

        Args:
            config_dir: Directory for config files. Defaults to ~/.polarlink
        """
        self.config_dir = config_dir or (Path.home() / ".polarlink")
        self.config_file = self.config_dir / "config.json"

    def _ensure_config_dir(self):
        """Ensure configuration directory exists."""
        self.config_dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value with layered priority.

        Priority order:
        1. Environment variable
        2. Config file
        3. Default value

        Args:
            key: Configuration key
            default: Default value if not found

        Returns:
            Configuration value
        """
        env_key = ENV_MAPPINGS.get(key, f"POLARLINK_{key.upper()}")
        env_value = os.getenv(env_key)
        if env_value is not None:
            return self._parse_value(env_value, key)

        config_data = self._load_config_file()
        if key in config_data:
            return config_data[key]

        return DEFAULTS.get(key, default)

    def get_all(self) -> dict[str, Any]:
        """Get all configuration values.

        Returns:
            Dictionary of all configuration values
        """
        config = {}
        config.update(DEFAULTS)
        config.update(self._load_config_file())

        for key, env_key in ENV_MAPPINGS.items():
            env_value = os.getenv(env_key)
            if env_value is not None:
                config[key] = self._parse_value(env_value, key)

        return config

    def source_of(self, key: str) -> str:
        """Name the layer a key's current value comes from."""
        if os.getenv(ENV_MAPPINGS.get(key, f"POLARLINK_{key.upper()}")) is not None:
            return "environment"
        if key in self._load_config_file():
            return "config file"
        return "default"

    def set(self, key: str, value: Any):
        """Set configuration value in config file.

        Args:
            key: Configuration key
            value: Configuration value
        """
        config_data = self._load_config_file()
        config_data[key] = value
        self._save_config_file(config_data)

    def unset(self, key: str):
        """Remove configuration value from config file.

        Args:
            key: Configuration key
        """
        config_data = self._load_config_file()
        config_data.pop(key, None)
        self._save_config_file(config_data)

    def _load_config_file(self) -> dict[str, Any]:
        if not self.config_file.exists():
            return {}

        try:
            return orjson.loads(self.config_file.read_bytes())
        except (OSError, orjson.JSONDecodeError):
            return {}

    def _save_config_file(self, config_data: dict[str, Any]):
        self._ensure_config_dir()
        self.config_file.write_bytes(orjson.dumps(config_data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))

    def _parse_value(self, value: str, key: str) -> Any:
        """Parse string value based on expected type.

        Args:
            value: String value to parse
            key: Configuration key (for type inference)

        Returns:
            Parsed value, or the default when the string does not parse
        """
        default = DEFAULTS.get(key)

        if isinstance(default, int):
            try:
                return int(value)
            except ValueError:
                return default
        elif isinstance(default, float):
            try:
                return float(value)
            except ValueError:
                return default
        else:
            return value
