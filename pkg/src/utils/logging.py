import logging
import sys

import structlog

from src.config import get_settings

def setup_logging():
    """Setup structured logging configuration"""
    settings = get_settings()

    renderer = (
        structlog.processors.JSONRenderer()
        if settings.LOG_JSON
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    formatter = structlog.stdlib.ProcessorFormatter(
        processor=renderer,
        foreign_pre_chain=[
            structlog.stdlib.add_log_level,
            structlog.stdlib.add_logger_name,
            structlog.processors.TimeStamper(fmt="iso"),
        ],
    )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)

    # Configure root logger
    root = logging.getLogger()
    root.handlers = [handler]
    level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL
    root.setLevel(getattr(logging, level.upper()))

    structlog.configure(
        processors=[
            structlog.stdlib.add_log_level,
            structlog.stdlib.add_logger_name,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )

    # Suppress noisy loggers
    solver_level = logging.DEBUG if settings.SOLVER_VERBOSE else logging.WARNING
    logging.getLogger("qpsolvers").setLevel(solver_level)
    logging.getLogger("clarabel").setLevel(solver_level)
