"""
Logging configuration and setup
Console plus rotating application log, and a per-stage run.log written
into each stage's output directory
"""

import logging
import logging.handlers
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

from config.settings import settings
from utils.exceptions import ConfigError

CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = (
    '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
)
RUN_LOG = "run.log"
LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _level(name: str) -> int:
    if name.upper() not in LEVELS:
        raise ConfigError(
            f"unknown log level {name!r}; expected one of {', '.join(LEVELS)}"
        )
    return getattr(logging, name.upper())


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """Configure the root logger; repeated calls replace the handlers"""
    level_no = _level(level or settings.log_level)
    log_file = log_file if log_file is not None else settings.log_file

    root_logger = logging.getLogger()
    root_logger.setLevel(level_no)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level_no)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt='%H:%M:%S'))
    root_logger.addHandler(console_handler)

    if log_file:
        logs_dir = Path(settings.logs_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            logs_dir / log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        root_logger.addHandler(file_handler)

    # plotting and image libraries are chatty at DEBUG
    for noisy in ('matplotlib', 'PIL'):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.debug(f"▶️ Logging initialized at {logging.getLevelName(level_no)}")
    if log_file:
        logger.debug(f"📄 Log file: {logs_dir / log_file}")


@contextmanager
def run_log(out_dir: Union[str, Path], level: int = logging.INFO) -> Iterator[Path]:
    """Mirror root log records into out_dir/run.log while the block runs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_LOG
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    root_logger = logging.getLogger()
    previous = root_logger.level
    root_logger.addHandler(handler)
    if root_logger.getEffectiveLevel() > level:
        root_logger.setLevel(level)
    try:
        yield path
    finally:
        root_logger.removeHandler(handler)
        root_logger.setLevel(previous)
        handler.close()


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for a specific module"""
    return logging.getLogger(name)
