import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

from copyforge.config import settings

LOGGER_NAME = "copyforge"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
TEST_FORMAT = "%(levelname)s - %(message)s"
MB = 1024 * 1024


def _in_pytest() -> bool:
    return os.getenv("PYTEST_CURRENT_TEST") is not None or "pytest" in sys.modules


def _handler(handler: logging.Handler, level: int, fmt: str) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(fmt))
    return handler


def setup_logger() -> logging.Logger:
    """Package logger: stdout-only at WARNING under pytest, rotating files otherwise."""
    logger = logging.getLogger(LOGGER_NAME)
    logger.handlers.clear()

    if _in_pytest():
        logger.setLevel(logging.WARNING)
        logger.addHandler(_handler(logging.StreamHandler(sys.stdout), logging.WARNING, TEST_FORMAT))
        return logger

    level = logging.getLevelName(settings.LOG_LEVEL.upper())
    if not isinstance(level, int):
        level = logging.INFO
    logs_dir = Path(settings.LOG_DIR)
    logs_dir.mkdir(parents=True, exist_ok=True)

    logger.setLevel(level)
    for handler, handler_level in (
        (RotatingFileHandler(logs_dir / "copyforge.log", maxBytes=50 * MB, backupCount=10), level),
        (RotatingFileHandler(logs_dir / "errors.log", maxBytes=10 * MB, backupCount=5), logging.ERROR),
        (logging.StreamHandler(sys.stdout), level),
    ):
        logger.addHandler(_handler(handler, handler_level, FILE_FORMAT))
    return logger


logger = setup_logger()
