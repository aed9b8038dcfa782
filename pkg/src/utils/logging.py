"""Set up logging, warning, etc."""

import logging
import threading
import warnings


class RepeatedWarningFilter(logging.Filter):
    """
    A logging filter that lets each distinct warning through only once.

    Grid fan-outs evaluate many cells that hit the same condition (for example
    a coefficient standard error above tolerance); only the first record of
    each (logger, message) pair at WARNING level is kept.
    """

    def __init__(self) -> None:
        """Initialise the filter with an empty record of seen warnings."""
        super().__init__()
        self._seen: set[tuple[str, str]] = set()
        self._lock = threading.Lock()

    def filter(self, record: logging.LogRecord) -> bool:
        """Define filter logic."""
        if record.levelno != logging.WARNING:
            return True

        key = (record.name, record.getMessage())
        with self._lock:
            if key in self._seen:
                return False
            self._seen.add(key)
        return True


def set_up_logging(level: int | str = logging.INFO) -> None:
    """Set up Logging and Warning levels."""
    root_logger = logging.getLogger()
    filter_ = RepeatedWarningFilter()

    if not root_logger.handlers:
        logging.basicConfig(
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
    root_logger.setLevel(level)

    for handler in root_logger.handlers:
        handler.addFilter(filter_)

    warnings.filterwarnings("ignore", category=ResourceWarning)
