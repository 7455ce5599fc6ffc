import logging
import sys
from pathlib import Path
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(
    verbose: bool = False, log_file: Optional[Path] = None
) -> logging.Logger:
    """Configure the rtchmc logger for one CLI invocation.

    Handlers from a previous call are dropped. Console output goes to stderr
    and only in verbose mode, so stdout stays free for validate/diagnose
    reports. A log file, when given, receives the same records.
    """
    logger = get_logger()

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    level = logging.DEBUG if verbose else logging.INFO
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    handlers: list[logging.Handler] = []
    if verbose:
        handlers.append(logging.StreamHandler(sys.stderr))
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def get_logger() -> logging.Logger:
    """Get the rtchmc logger."""
    return logging.getLogger("rtchmc")
