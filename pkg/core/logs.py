from __future__ import annotations
import logging

ROOT_LOGGER = "geoadapt"
LOG_FORMAT = "[%(asctime)s %(levelname)s %(filename)s line %(lineno)d %(process)d] %(message)s"


def get_logger(name: str | None = None) -> logging.Logger:
    if not name or name == ROOT_LOGGER:
        return logging.getLogger(ROOT_LOGGER)
    return logging.getLogger(f"{ROOT_LOGGER}.{name.split('.')[-1]}")


def configure_logging(level: int = logging.INFO, log_file: str | None = None) -> logging.Logger:
    """Attach handlers to the package logger and to captured warnings. Only the CLI calls this."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for h in handlers:
        h.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.captureWarnings(True)
    for name in (ROOT_LOGGER, "py.warnings"):
        logger = logging.getLogger(name)
        logger.setLevel(level)
        for h in list(logger.handlers):
            logger.removeHandler(h)
            h.close()
        for h in handlers:
            logger.addHandler(h)
        logger.propagate = False
    return logging.getLogger(ROOT_LOGGER)
