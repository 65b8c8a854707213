import logging
from typing import Optional

from canseg.core.config import settings


def configure_logging(level: Optional[str] = None) -> None:
    """Install the root handler once; later calls only change the level."""
    root = logging.getLogger()
    resolved = (level or settings.log_level).upper()
    if not root.handlers:
        logging.basicConfig(level=resolved, format=settings.log_format)
    root.setLevel(resolved)
