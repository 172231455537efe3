import logging
import math
import os
from pathlib import Path
from typing import Any, Dict

import yaml
from dotenv import dotenv_values

from services.exceptions import ConfigError

LOGGER_NAME = "multilevel_eigen"
LOG_LEVEL_ENV = "MLC_LOG_LEVEL"


def load_config_file(file_path: Path | str) -> Dict[str, Any]:
    """
    Reads run settings from a config file.
    `.yaml`/`.yml` files hold a YAML mapping; anything else is read as flat
    key=value lines (python-dotenv syntax, `#` comments).

    Args:
        file_path: Path to the config file.

    Returns:
        Mapping of RunConfig field names to raw values (validated later by RunConfig).

    Raises:
        ConfigError: If the file does not exist or does not hold a mapping.
    """
    file_path = Path(file_path) if isinstance(file_path, str) else file_path

    if not file_path.exists():
        raise ConfigError(f"Config file not found: {file_path}")

    if file_path.suffix.lower() in (".yaml", ".yml"):
        with open(file_path, 'r', encoding='utf-8') as file:
            try:
                data = yaml.safe_load(file)
            except yaml.YAMLError as e:
                raise ConfigError(f"Invalid YAML in {file_path}: {e}")
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {file_path} must hold a mapping, got {type(data).__name__}.")
    else:
        data = dotenv_values(file_path)

    # Normalize keys so `refine-step` and `REFINE_STEP` both reach the field `refine_step`
    return {
        str(key).strip().lower().replace("-", "_"): value
        for key, value in data.items()
        if value is not None and value != ""
    }


def estimate_rate(
    errors: list[float | None],
    sizes: list[float],
    floor: float = 0.0,
) -> tuple[list[float | None], list[bool]]:
    """
    Observed convergence orders slope_k = ln(e_{k-1} / e_k) / ln(s_{k-1} / s_k).

    Args:
        errors: Error per run (None when not available).
        sizes: Mesh size (or any discretization parameter) per run.
        floor: Errors at or below this level count as saturated.

    Returns:
        Slopes and saturation flags, one per run. The first slope is always None;
        a run whose error is at or below `floor` is flagged as saturated
        and gets no slope, as does the run after it.
    """
    if len(errors) != len(sizes):
        raise ValueError(f"Got {len(errors)} errors for {len(sizes)} sizes.")
    rates: list[float | None] = [None]
    saturated = [errors[0] is not None and errors[0] <= floor] if errors else []
    for k in range(1, len(errors)):
        previous, current = errors[k - 1], errors[k]
        if current is not None and current <= floor:
            saturated.append(True)
            rates.append(None)
            continue
        saturated.append(False)
        if previous is None or current is None or previous <= floor or sizes[k - 1] == sizes[k]:
            rates.append(None)
            continue
        rates.append(math.log(previous / current) / math.log(sizes[k - 1] / sizes[k]))
    return rates, saturated


def setup_logging(verbosity: int = 0) -> logging.Logger:
    """
    Configures the project logger. The base level comes from MLC_LOG_LEVEL
    (default WARNING); each verbosity step lowers it by one level.
    """
    name = os.getenv(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"Unknown log level in {LOG_LEVEL_ENV}: {name}")
    if verbosity:
        level = max(logging.DEBUG, min(level, logging.WARNING) - 10 * verbosity)

    logger = logging.getLogger(LOGGER_NAME)
    # one handler, bound to the current stderr
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    return logger
