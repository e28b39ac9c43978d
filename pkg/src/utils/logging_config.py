# logging_config.py
import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

# Source location and thread name on every record
default_fmt = '%(asctime)s.%(msecs)03d-%(filename)s:%(lineno)d-%(funcName)s()-%(threadName)s-%(levelname)s- %(message)s'
# DD-MM-YYYY HH:MM:SS, milliseconds come from the format string
date_fmt = '%d-%m-%Y %H:%M:%S'

# Every logger handed out by module_logger
_project_loggers: set[str] = set()


def setup_logger(name: str = 'default_app_logger', log_file: Optional[str] = '', console_level: int = logging.INFO, logfile_level: int = logging.DEBUG, max_bytes: int = 10485760, backup_count: int = 5) -> logging.Logger:
    """
    Sets up a logger with a file handler and a console handler.
    :param name: The name of the logger.
    :param log_file: The optional path to the log file. Parent directories are created.
    :param console_level: The console logging level (e.g., logging.INFO, logging.DEBUG).
    :param logfile_level: The file logging level.
    :param max_bytes: The maximum size of the log file before rotation (in bytes).
    :param backup_count: The number of backup log files to keep.
    :return: A configured logger instance.
    """

    logger = logging.getLogger(name)
    logger.setLevel(min(console_level, logfile_level) if log_file else console_level)

    # Prevent adding multiple handlers if the logger is already configured
    if not logger.handlers:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(console_level)

        formatter = logging.Formatter(fmt=default_fmt, datefmt=date_fmt)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        if log_file:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            file_handler = RotatingFileHandler(log_file, maxBytes=max_bytes, backupCount=backup_count)
            file_handler.setLevel(logfile_level)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger


def module_logger(prefix: str, default_name: str) -> logging.Logger:
    """
    Configure a module logger from the ``<PREFIX>_*`` environment block.

    Recognised variables: ``<PREFIX>_LOG_FILE`` (falls back to ``LOGGING_FILE``,
    then ``logs/<default_name>.log``), ``<PREFIX>_LOGGER_NAME``,
    ``<PREFIX>_CONSOLE_LEVEL``, ``<PREFIX>_FILE_LEVEL``, ``<PREFIX>_MAX_BYTES``
    and ``<PREFIX>_BACKUP_COUNT``.
    """
    logging_file = os.getenv(f'{prefix}_LOG_FILE', os.getenv('LOGGING_FILE', f'logs/{default_name}.log'))
    logger_name = os.getenv(f'{prefix}_LOGGER_NAME', default_name)
    console_level = getattr(logging, os.getenv(f'{prefix}_CONSOLE_LEVEL', 'INFO').upper(), logging.INFO)
    file_level = getattr(logging, os.getenv(f'{prefix}_FILE_LEVEL', 'DEBUG').upper(), logging.DEBUG)
    max_bytes = int(os.getenv(f'{prefix}_MAX_BYTES', '10485760'))
    backup_count = int(os.getenv(f'{prefix}_BACKUP_COUNT', '5'))

    _project_loggers.add(logger_name)
    return setup_logger(logger_name, log_file=logging_file, console_level=console_level, logfile_level=file_level, max_bytes=max_bytes, backup_count=backup_count)


def set_verbose(enabled: bool = True) -> None:
    """Switch every project logger (and its console handler) to DEBUG or back to INFO."""
    level = logging.DEBUG if enabled else logging.INFO
    for name in _project_loggers:
        logger = logging.getLogger(name)
        if enabled:
            logger.setLevel(logging.DEBUG)
        for handler in logger.handlers:
            if not isinstance(handler, RotatingFileHandler):
                handler.setLevel(level)
