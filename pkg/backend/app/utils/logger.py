"""
Module: utils.logger
--------------------

Centralized logging configuration. The CLI entry point and the FastAPI app
factory call ``configure_logging`` once; every other module only does
``logging.getLogger(__name__)``.

The level comes from ``Settings.log_level`` (env ``PROTOOCC_LOG_LEVEL``)
unless given explicitly.
"""

import logging
from typing import Optional, Union

from app.core.config import get_settings

DEFAULT_FORMAT = "%(asctime)s | %(levelname)s | %(name)s.%(funcName)s | %(message)s"


def configure_logging(level: Optional[Union[str, int]] = None) -> None:
    settings = get_settings()
    if level is None:
        level = settings.log_level
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger("app")
    root.setLevel(level)
    if not any(getattr(h, "_protoocc", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(settings.log_format or DEFAULT_FORMAT))
        handler._protoocc = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.propagate = False
