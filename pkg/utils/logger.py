import logging
import os
from datetime import datetime

from config import Config

_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Logger:
    def __init__(self, name="histocr"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(Config.LOG_LEVEL)

        # Handlers are attached once per name; modules create their Logger at import.
        if getattr(self.logger, "_histocr_configured", False):
            return

        formatter = logging.Formatter(_FORMAT)

        # Console handler (stderr, stdout carries results)
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        # File handler
        if Config.LOG_DIR:
            os.makedirs(Config.LOG_DIR, exist_ok=True)
            file_handler = logging.FileHandler(
                os.path.join(
                    Config.LOG_DIR, f"{name}_{datetime.now().strftime('%Y%m%d')}.log"
                ),
                encoding="utf-8",
            )
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

        self.logger.propagate = False
        self.logger._histocr_configured = True

    def set_level(self, level):
        self.logger.setLevel(level)

    def debug(self, message):
        self.logger.debug(message)

    def info(self, message):
        self.logger.info(message)

    def warning(self, message):
        self.logger.warning(message)

    def error(self, message):
        self.logger.error(message)

    def critical(self, message):
        self.logger.critical(message)


def set_global_level(level) -> None:
    """Apply a level to every histocr logger created so far."""
    Config.LOG_LEVEL = level
    for logger in logging.Logger.manager.loggerDict.values():
        if isinstance(logger, logging.Logger) and getattr(
            logger, "_histocr_configured", False
        ):
            logger.setLevel(level)
