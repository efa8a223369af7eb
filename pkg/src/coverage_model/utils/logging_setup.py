# src/coverage_model/utils/logging_setup.py
import logging
import os
from typing import Optional, Union

from dotenv import load_dotenv

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL_ENV = "COVERAGE_MODEL_LOG_LEVEL"


def configure_logging(level: Optional[Union[str, int]] = None) -> logging.Logger:
    """
    Configures the package logger with a single stream handler.

    Args:
        level: Logging level name or number. When omitted, the level is read from
               the COVERAGE_MODEL_LOG_LEVEL environment variable (a .env file in the
               working directory is honoured), falling back to INFO.

    Returns:
        The package root logger.
    """
    load_dotenv()
    if level is None:
        level = os.environ.get(LOG_LEVEL_ENV, "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    package_logger = logging.getLogger("src.coverage_model")
    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(handler)
    package_logger.setLevel(level)
    return package_logger
