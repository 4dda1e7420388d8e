import os
import json
import yaml
import logging
from pathlib import Path
from typing import Dict, Any, Union
from dotenv import dotenv_values
from pydantic import ValidationError

from longidesign.errors import ConfigError, ScenarioError
from longidesign.model.schema import Scenario

logger = logging.getLogger(__name__)

THREADS_ENV = "LONGIDESIGN_THREADS"


def get_thread_cap() -> int:
    """
    Worker cap for sweeps and simulations: the process environment first,
    then a .env file, then the CPU count.
    """
    raw = os.environ.get(THREADS_ENV) or dotenv_values().get(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
        return value
    return os.cpu_count() or 1


def load_config(config_path: Path) -> Dict[str, Any]:
    """
    Loads the YAML defaults file.
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found at: {config_path}")
    try:
        with open(config_path, 'r') as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config Error in {config_path}: {e}") from e
    if not isinstance(config, dict):
        raise ConfigError(f"Config Error in {config_path}: expected a mapping of parameter groups")
    return config


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Reads a scenario JSON file, or the scenario embedded in a saved design report.
    Params:
        path: JSON file path.
    Returns:
        Validated Scenario. pydantic's ValidationError propagates with field paths.
    """
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"Scenario file not found at: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Scenario file {path} is not valid JSON: {e}") from e
    if isinstance(data, dict) and "scenario" in data and "results" in data:
        logger.info("reading the scenario embedded in report %s", path)
        data = data["scenario"]
    return Scenario.model_validate(data)


def format_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "Invalid scenario:\n" + "\n".join(lines)
