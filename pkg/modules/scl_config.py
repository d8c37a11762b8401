import json
import os
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv
from dpath import util as dpath_util

from modules.data_types import RunConfig
from modules.errors import ConfigError

load_dotenv()

DEFAULT_CONFIG_PATH = os.getenv("SCL_CONFIG", "scl_config.yml")

BUILTIN_DEFAULTS: Dict[str, Any] = {
    "logging": {"level": "INFO", "log_dir": None},
    "cli": {"default_config": None},
}


def get_config(dot_path_key: str, config_path: str = DEFAULT_CONFIG_PATH) -> Any:
    """
    Load a field from the YAML defaults file using dot notation path.

    Args:
        dot_path_key: The key path to look up in the config (e.g. 'logging.level')
        config_path: Path to the YAML config file, defaults to scl_config.yml

    Returns:
        The value for the requested key path. Falls back to the built-in
        defaults when the file is missing or does not set the key.

    Raises:
        ConfigError: If the file is not a YAML mapping
        KeyError: If the key path is unknown to both the file and the defaults
    """
    abs_config_path = os.path.join(os.getcwd(), config_path)

    config: Dict[str, Any] = {}
    if os.path.exists(abs_config_path):
        with open(abs_config_path) as f:
            try:
                config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Config file {abs_config_path} is not valid YAML: {e}")
        if not isinstance(config, dict):
            raise ConfigError(
                f"Config file {abs_config_path} must contain a mapping at the top level"
            )

    for source in (config, BUILTIN_DEFAULTS):
        try:
            return dpath_util.get(source, dot_path_key, separator=".")
        except KeyError:
            continue
    raise KeyError(f"Key path '{dot_path_key}' not found in config")


def read_config_document(path: str) -> Dict[str, Any]:
    """Parse a run configuration file. `.json` goes through json, anything else through YAML."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found at {path}")

    with open(path, "r") as f:
        text = f.read()

    try:
        if path.lower().endswith(".json"):
            document = json.loads(text) if text.strip() else {}
        else:
            document = yaml.safe_load(text) or {}
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Config file {path} is not valid JSON/YAML: {e}")

    if not isinstance(document, dict):
        raise ConfigError(f"Config file {path} must contain a mapping at the top level")
    return document


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """Load and validate a run config; `None` means built-in defaults."""
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(read_config_document(path))


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Apply dot-path overrides such as {'train.seed': 3} and re-validate.

    `None` values are skipped so optional CLI flags can be passed straight through.
    """
    document = config.model_dump()
    for dot_path_key, value in overrides.items():
        if value is None:
            continue
        dpath_util.new(document, dot_path_key, value, separator=".")
    return RunConfig.model_validate(document)
