import logging
import os
import sys
from datetime import datetime
from typing import Optional

from src.utils.errors import ConfigError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(name: str = "openworld_kit", log_level: str = "INFO", log_dir: Optional[str] = "logs") -> logging.Logger:
    """
    Configure a logger, normally the package root, so every `openworld_kit.<area>` child reports through it.

    Calling again replaces the handlers, so a later level or directory takes effect.

    Args:
        name: Logger to configure.
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL.
        log_dir: Directory for a per-run log file; None logs to the console only.

    Returns:
        logging.Logger: The configured logger.
    """
    level = logging.getLevelName(str(log_level).upper())
    if not isinstance(level, int):
        raise ConfigError(f"Unknown log level {log_level!r}")

    logger = logging.getLogger(name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    logger.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = os.path.join(log_dir, f"{name}_{stamp}.log")
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
        logger.debug(f"Writing log file {log_file}")

    return logger
