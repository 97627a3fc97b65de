import logging
import os
import sys
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from typing import ClassVar

_sim_clock: ContextVar[Callable[[], int] | None] = ContextVar("geokv_sim_clock", default=None)


class SimClockFilter(logging.Filter):
    """Adds ``sim_time`` to every record: the simulated clock of the run in progress, or ''."""

    def filter(self, record: logging.LogRecord) -> bool:
        clock = _sim_clock.get()
        record.__dict__["sim_time"] = f"[t={clock() / 1e6:.6f}s] " if clock is not None else ""
        return True


@contextmanager
def sim_clock(clock: Callable[[], int]) -> Iterator[None]:
    """Stamp log lines emitted inside the block with ``clock()`` simulated microseconds."""
    token = _sim_clock.set(clock)
    try:
        yield
    finally:
        _sim_clock.reset(token)


class ColoredFormatter(logging.Formatter):
    """Colour formatter for terminal output."""

    COLORS: ClassVar[dict[str, str]] = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
        "RESET": "\033[0m",
        "GREEN": "\033[32m",
        "CYAN": "\033[36m",
        "DIM": "\033[2m",
    }

    def format(self, record: logging.LogRecord) -> str:
        c = self.COLORS
        timestamp = f"{c['GREEN']}{self.formatTime(record, '%Y-%m-%d %H:%M:%S')}{c['RESET']}"
        level = f"{c.get(record.levelname, '')}{record.levelname:<8}{c['RESET']}"
        location = f"{c['CYAN']}{record.name}:{record.funcName}:{record.lineno}{c['RESET']}"
        sim_time = getattr(record, "sim_time", "")
        clock = f"{c['DIM']}{sim_time}{c['RESET']}" if sim_time else ""
        message = f"{c.get(record.levelname, '')}{record.getMessage()}{c['RESET']}"
        return f"{timestamp} | {level} | {location} - {clock}{message}"


def _setup_logger() -> logging.Logger:
    log_level_name = os.getenv("GEOKV_LOG_LEVEL", "WARNING").upper()

    _logger = logging.getLogger("geokv")
    _logger.setLevel(getattr(logging, log_level_name, logging.WARNING))
    _logger.propagate = False
    _logger.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(SimClockFilter())
    if sys.stderr.isatty():
        handler.setFormatter(ColoredFormatter())
    else:
        handler.setFormatter(
            logging.Formatter(
                "%(asctime)s | %(levelname)-8s | %(name)s:%(funcName)s:%(lineno)d - %(sim_time)s%(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
    _logger.addHandler(handler)
    return _logger


def set_log_level(level: int | str) -> None:
    """Change the package log level at runtime (the CLI's -v / -vv flags)."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.WARNING)
    logger.setLevel(level)


logger = _setup_logger()

__all__ = ["logger", "set_log_level", "sim_clock"]
