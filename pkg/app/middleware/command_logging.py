"""Command logging middleware for observability."""

import functools
import logging
import time
from typing import Callable

from app.errors import RotsetError

logger = logging.getLogger("rotset.command")

CommandHandler = Callable[..., int]


def log_command(name: str) -> Callable[[CommandHandler], CommandHandler]:
    """Log every command run with its name, exit code, and latency."""

    def decorator(handler: CommandHandler) -> CommandHandler:
        @functools.wraps(handler)
        def wrapper(*args, **kwargs) -> int:
            start = time.perf_counter()
            code = 1
            try:
                code = handler(*args, **kwargs)
                return code
            except RotsetError as e:
                code = e.exit_code
                raise
            finally:
                elapsed_ms = (time.perf_counter() - start) * 1000
                logger.info("%s exit=%d %.1fms", name, code, elapsed_ms)

        return wrapper

    return decorator
