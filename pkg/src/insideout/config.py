"""Configuration loader with YAML parsing and environment variable substitution."""

import os
import re
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from insideout.models.config import ExperimentConfig
from insideout.models.errors import ErrorCode, InsideOutError

ENV_PATTERN = re.compile(r"\$\{([^}]+)\}")


class ConfigError(InsideOutError):
    """Configuration loading or validation error."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(code=ErrorCode.INVALID_CONFIG, message=message, details=details)


def substitute_env_vars(data: Any) -> Any:
    """
    Recursively substitute ${VAR} patterns with environment variables.

    Supports:
    - ${VAR} - required, raises error if not set
    - ${VAR:-} - optional, uses empty string if not set
    - ${VAR:-default} - uses "default" if not set

    A string that is exactly one ${VAR} reference is parsed as a YAML scalar after
    substitution, so ``seed: ${SEED:-7}`` yields an int.

    Raises ConfigError if a required environment variable is not set.
    """
    if isinstance(data, dict):
        return {key: substitute_env_vars(value) for key, value in data.items()}
    elif isinstance(data, list):
        return [substitute_env_vars(item) for item in data]
    elif isinstance(data, str):
        matches = ENV_PATTERN.findall(data)
        if not matches:
            return data

        result = data
        for match in matches:
            if ":-" in match:
                var_name, default_value = match.split(":-", 1)
                env_value = os.environ.get(var_name, default_value)
            else:
                var_name = match
                env_value = os.environ.get(var_name)
                if env_value is None:
                    raise ConfigError(
                        f"Environment variable '{var_name}' is required but not set",
                        details={"variable": var_name},
                    )
            result = result.replace(f"${{{match}}}", env_value)

        # Empty optional values fall back to model defaults
        if result == "":
            return None
        if ENV_PATTERN.fullmatch(data):
            try:
                return yaml.safe_load(result)
            except yaml.YAMLError:
                return result
        return result
    else:
        return data


def _validate(data: dict[str, Any]) -> ExperimentConfig:
    # None values come from empty optional substitutions
    cleaned = _drop_none(data)
    try:
        return ExperimentConfig(**cleaned)
    except ValidationError as e:
        raise ConfigError(f"Config validation failed: {e}", details={"errors": e.error_count()})


def _drop_none(data: Any) -> Any:
    if isinstance(data, dict):
        return {k: _drop_none(v) for k, v in data.items() if v is not None}
    if isinstance(data, list):
        return [_drop_none(v) for v in data]
    return data


def load_config(config_path: str | Path | None) -> ExperimentConfig:
    """
    Load and validate an experiment configuration from a YAML file.

    Args:
        config_path: Path to the experiment file; None means all defaults

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: If file not found, YAML invalid, env vars missing, or validation fails
    """
    if config_path is None:
        return ExperimentConfig()

    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}", details={"path": str(config_path)})

    try:
        with open(config_path) as f:
            raw_data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in config file: {e}")

    if raw_data is None:
        raise ConfigError("Config file is empty")
    if not isinstance(raw_data, dict):
        raise ConfigError("Config file must contain a mapping at the top level")

    return _validate(substitute_env_vars(raw_data))


def load_config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """
    Load and validate configuration from dictionary (for testing).

    Raises:
        ConfigError: If validation fails
    """
    return _validate(substitute_env_vars(data))
