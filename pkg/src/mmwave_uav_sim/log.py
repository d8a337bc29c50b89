"""Loguru sink setup shared by the CLI and long-running entry points."""

import os
import sys
from typing import Optional

from loguru import logger


LOG_FORMAT = (
    "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <7}</level> | "
    "<cyan>{name}</cyan> - <level>{message}</level>"
)


def configure_logging(level: Optional[str] = None) -> str:
    """Replace loguru's default sink with a single stderr sink.

    Args:
        level: Explicit level name. Falls back to MMWAVE_LOG_LEVEL, then INFO.

    Returns:
        The level actually installed.
    """
    # MMWAVE_DEBUG=1 forces debug output regardless of MMWAVE_LOG_LEVEL
    if os.environ.get("MMWAVE_DEBUG", "0") == "1":
        resolved = "DEBUG"
    else:
        resolved = (level or os.environ.get("MMWAVE_LOG_LEVEL") or "INFO").upper()

    logger.remove()
    logger.add(sys.stderr, level=resolved, format=LOG_FORMAT)
    return resolved
