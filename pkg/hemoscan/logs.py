"""
Console and file logging
Output lines look like "[SLICE-ENCODER] epoch 1/3 ..." so every message carries the
component it came from.
"""
import logging
import os

LOG_FORMAT = "[%(tag)s] %(message)s"
DEFAULT_LEVEL = "INFO"


class TagFormatter(logging.Formatter):
    """Formats records as [TAG] message, TAG derived from the logger name"""

    def format(self, record):
        record.tag = record.name.rsplit(".", 1)[-1].upper().replace("_", "-")
        return super().format(record)


def configure_logging(level=None, log_file=None):
    """Install tagged handlers on the hemoscan logger tree"""
    level = (level or os.getenv("LOG_LEVEL", DEFAULT_LEVEL)).upper()
    root = logging.getLogger("hemoscan")
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(TagFormatter(LOG_FORMAT))
    root.addHandler(console)

    if log_file:
        file_handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        file_handler.setFormatter(TagFormatter(LOG_FORMAT))
        root.addHandler(file_handler)

    root.propagate = False
    return root
