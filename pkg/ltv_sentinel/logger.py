import logging
import colorlog
from pathlib import Path

from ltv_sentinel.helpers import create_directory, create_file

LOG_LEVELS = {
    "critical": logging.CRITICAL,
    "error": logging.ERROR,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def setup_logger(
    name: str, level: str = "warning", logs_dir: Path | str = None
) -> logging.Logger:
    """Configures a named logger with a colored stream handler and a log file.

    Calling it again for a logger that already has handlers returns it untouched.

    Args:
        name (str): Logger name, also used for the log file name.
        level (str): One of critical, error, warning, info, debug. Defaults to 'warning' (optional).
        logs_dir (Path, str): Directory for the log file. Defaults to ./logs (optional).

    Returns:
        logging.Logger: The configured logger.
    """
    if level not in LOG_LEVELS:
        raise ValueError(f"Unknown log level '{level}'")
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    logger.setLevel(LOG_LEVELS[level])

    logs_dir = Path(logs_dir) if logs_dir else Path.cwd() / "logs"
    logs_file = logs_dir / f"{name}_logfile.log"
    if not logs_dir.exists():
        create_directory(logs_dir)
    if not logs_file.exists():
        create_file(logs_file)
    file_handler = logging.FileHandler(logs_file)
    file_handler.setLevel(LOG_LEVELS[level])

    # colorlog streams to stderr.
    stream_handler = colorlog.StreamHandler()
    stream_handler.setLevel(LOG_LEVELS[level])

    formatter = colorlog.ColoredFormatter(
        "%(log_color)s[%(asctime)s - %(levelname)s/%(name)s]: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        log_colors={
            "DEBUG": "blue",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "magenta",
        },
    )

    file_handler.setFormatter(
        logging.Formatter("[%(asctime)s - %(levelname)s/%(name)s]: %(message)s")
    )
    stream_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(stream_handler)

    return logger


PACKAGE_LOGGERS = ("ltv_sentinel", "utils")


def share_handlers(logger: logging.Logger, names=PACKAGE_LOGGERS) -> None:
    """Routes the package loggers through logger's handlers at logger's level.

    Module loggers are children of the package loggers, so one call covers every module.

    Args:
        logger (logging.Logger): The configured CLI logger.
        names (tuple): Parent logger names. Defaults to PACKAGE_LOGGERS (optional).
    """
    for name in names:
        package_logger = logging.getLogger(name)
        package_logger.setLevel(logger.level)
        for handler in logger.handlers:
            if handler not in package_logger.handlers:
                package_logger.addHandler(handler)
