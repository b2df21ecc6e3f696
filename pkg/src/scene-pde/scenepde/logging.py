"""Structured logging setup.

Results are printed on stdout by the commands; log events go to stderr.
"""
import logging
import sys
import typing

import structlog

from .errors import UsageError
from .settings import LogSettings

LOG_LEVELS = {
    "critical": logging.CRITICAL,
    "error": logging.ERROR,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class StructlogHandler(logging.Handler):
    """
    Feeds all events back into structlog.
    """

    def __init__(self, *args: typing.Any, **kw: typing.Any):
        super().__init__(*args, **kw)
        self._log = structlog.get_logger()

    def emit(self, record: logging.LogRecord) -> None:
        message = record.getMessage()
        if record.levelno >= logging.ERROR:
            if record.exc_info:
                self._log.error(
                    message,
                    logger=record.name,
                    error_type=record.exc_info[0],
                    error=record.exc_info[1],
                )
            else:
                self._log.error(message, logger=record.name)
        elif record.levelno >= logging.WARNING:
            self._log.warning(message, logger=record.name)
        elif record.levelno >= logging.INFO:
            self._log.info(message, logger=record.name)
        else:
            self._log.debug(message, logger=record.name)


def configure_logging(settings: LogSettings, file: typing.Optional[typing.TextIO] = None) -> None:
    """Configure structlog for the whole process and route stdlib logging through it"""
    try:
        level = LOG_LEVELS[settings.level.lower()]
    except KeyError:
        raise UsageError(
            f"Unknown log level: {settings.level} (choose from {', '.join(LOG_LEVELS)})"
        ) from None
    renderer: typing.Union[structlog.dev.ConsoleRenderer, structlog.processors.JSONRenderer]
    if settings.renderer == "console":
        renderer = structlog.dev.ConsoleRenderer(colors=settings.colors)
    else:
        renderer = structlog.processors.JSONRenderer(sort_keys=True)
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.contextvars.merge_contextvars,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=file or sys.stderr),
        # Module level loggers must pick up a later reconfiguration
        cache_logger_on_first_use=False,
    )
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, StructlogHandler):
            root.removeHandler(handler)
    root.addHandler(StructlogHandler())
    root.setLevel(level)
