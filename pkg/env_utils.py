# env_utils.py
# Environment-variable hygiene shared by every module that reads its defaults
# at import time. Lives in a leaf module so the simulator, the protocol and
# the CLI all clean values the same way.

import logging
import os

logger = logging.getLogger(__name__)


def clean_env_value(name: str):
    """The env value with whitespace and accidental wrapping quotes removed;
    None when unset or effectively empty."""
    value = os.environ.get(name)
    if value is None:
        return None
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in {"'", '"'}:
        value = value[1:-1].strip()
    return value or None


def env_int(name: str, default: int) -> int:
    """An integer setting; an unparseable value logs a warning and falls
    back to the default."""
    value = clean_env_value(name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        logger.warning("Ignoring %s=%r: not an integer, using %s.", name, value, default)
        return default


def env_float(name: str, default: float) -> float:
    value = clean_env_value(name)
    if value is None:
        return default
    try:
        return float(value)
    except ValueError:
        logger.warning("Ignoring %s=%r: not a number, using %s.", name, value, default)
        return default
