import datetime
import logging
import os
import threading
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _file_handler(log_dir: str, filename: str, max_bytes: int) -> RotatingFileHandler:
    os.makedirs(log_dir, exist_ok=True)
    handler = RotatingFileHandler(os.path.join(log_dir, filename), maxBytes=max_bytes, backupCount=3)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    return handler


def configure_logging(level: int = logging.INFO, log_dir: Optional[str] = None,
                      filename: str = 'experiment.log', console: bool = True):
    """Attach console and rotating-file handlers to the root logger

    Args:
        level (int): Root log level
        log_dir (Optional[str]): Directory for the rotating log file, none if omitted
        filename (str): Name of the log file
        console (bool): Also log to stderr
    """
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    if console:
        stream = logging.StreamHandler()
        stream.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(stream)
    if log_dir:
        root.addHandler(_file_handler(log_dir, filename, 5 * 1024 * 1024))


class EventLogger:
    """Structured experiment events in a rotating file, capped by entry count"""

    def __init__(self, log_dir: str = 'logs',
                 filename: str = 'events.log',
                 max_bytes: int = 5 * 1024 * 1024,  # 5MB
                 max_entries: int = 10000):
        """Initialize the event logger

        Args:
            log_dir (str): Directory for log files
            filename (str): Name of the event log file
            max_bytes (int): Maximum size of the log file before rotation
            max_entries (int): Maximum number of events per file
        """
        self.log_dir = log_dir
        self.filename = filename
        self.max_entries = max_entries
        self.entry_count = 0
        self.lock = threading.Lock()

        self.logger = logging.getLogger('Events')
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()
        self.handler = _file_handler(log_dir, filename, max_bytes)
        self.logger.addHandler(self.handler)

        # Count current entries (approximate)
        try:
            with open(os.path.join(log_dir, filename), 'r') as f:
                self.entry_count = sum(1 for _ in f)
        except FileNotFoundError:
            self.entry_count = 0

    def log_event(self, event_type: str, details: Dict[str, Any], run_id: Optional[str] = None):
        """Log an event as `EVENT=<type> | key=value | ...`

        Args:
            event_type (str): Type of event (e.g. 'seed_started', 'seed_failed')
            details (Dict[str, Any]): Event details
            run_id (Optional[str]): Experiment name for grouping
        """
        with self.lock:
            if self.entry_count >= self.max_entries:
                self.handler.doRollover()
                self.entry_count = 0
                self.logger.info(f"Event log rotated after {self.max_entries} entries")

            log_details = dict(details)
            log_details['timestamp'] = datetime.datetime.now().isoformat()
            if run_id:
                log_details['run_id'] = run_id

            message = f"EVENT={event_type}"
            for key, value in log_details.items():
                message += f" | {key}={value}"
            self.logger.info(message)
            self.entry_count += 1


# Singleton instance for process-wide use
_event_logger: Optional[EventLogger] = None


def get_event_logger(log_dir: str = 'logs', filename: str = 'events.log') -> EventLogger:
    """Get or create the event logger; a different directory replaces the instance

    Args:
        log_dir (str): Directory for log files
        filename (str): Name of the event log file

    Returns:
        EventLogger: The logger instance
    """
    global _event_logger
    if _event_logger is None or _event_logger.log_dir != log_dir or _event_logger.filename != filename:
        _event_logger = EventLogger(log_dir, filename)
    return _event_logger
