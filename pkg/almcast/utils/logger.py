"""
Logging utilities for almcast.
"""

import sys
from pathlib import Path
from typing import Literal, Optional

from loguru import logger

_TEXT_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<cyan>{extra[name]}</cyan> | <level>{message}</level>"
)


def _ensure_levels() -> None:
    for name, no, color in (("SUCCESS", 25, "<green>"), ("PROGRESS", 15, "<blue>")):
        try:
            logger.level(name, no=no, color=color)
        except (TypeError, ValueError):
            pass  # already defined


_ensure_levels()


def setup_logger(
    level: str = "INFO",
    format_type: Literal["json", "text"] = "text",
    log_file: Optional[Path] = None
):
    """
    Configure loguru sinks.

    Args:
        level: Logging level (DEBUG, PROGRESS, INFO, SUCCESS, WARNING, ERROR)
        format_type: ``text`` for colored console lines, ``json`` for one serialized record per line
        log_file: Optional log file path (rotated)
    """
    logger.remove()
    logger.configure(extra={"name": "almcast"})
    _ensure_levels()

    serialize = format_type == "json"
    logger.add(
        sys.stderr,
        format=_TEXT_FORMAT,
        level=level,
        colorize=not serialize,
        serialize=serialize,
        backtrace=True,
        diagnose=False,
    )

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_file,
            format=_TEXT_FORMAT,
            level=level,
            serialize=serialize,
            rotation="10 MB",
            retention="7 days",
            compression="zip",
        )

    return logger


def get_logger(name: str = "almcast"):
    """Get logger instance for a specific module."""
    return logger.bind(name=name)
