import os
import logging
from datetime import datetime

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s: %(message)s"


def setup_logging(config):
    """Configure console + file logging once per process"""
    log_config = config.get('logging', {})
    log_path = log_config.get('log_path', './logs')
    os.makedirs(log_path, exist_ok=True)

    root = logging.getLogger()
    level = getattr(logging, str(log_config.get('level', 'INFO')).upper(), logging.INFO)
    root.setLevel(level)

    for handler in list(root.handlers):
        if getattr(handler, '_lab_handler', False):
            root.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT)
    handlers = [
        logging.StreamHandler(),
        logging.FileHandler(os.path.join(log_path, "run.log"), encoding='utf-8'),
    ]
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._lab_handler = True
        root.addHandler(handler)

    return root


class EventLogger:
    def __init__(self, config):
        log_config = config.get('logging', {})
        self.log_path = log_config.get('log_path', './logs')
        self.cooldown = log_config.get('event_cooldown', 10)
        self.events = []
        self.last_event_time = {}
        self.logger = logging.getLogger('EventLogger')

        os.makedirs(self.log_path, exist_ok=True)

    def log_event(self, event_type, message):
        """Log a run event; an identical (type, message) repeat inside the cooldown is dropped"""
        current_time = datetime.now().timestamp()
        key = (event_type, message)

        if key in self.last_event_time:
            if current_time - self.last_event_time[key] < self.cooldown:
                return None

        self.last_event_time[key] = current_time

        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        log_entry = f"{timestamp} - {event_type.upper()}: {message}"
        self.events.append(log_entry)
        self.logger.warning(f"{event_type.upper()}: {message}")

        log_file = os.path.join(self.log_path, "events.log")
        with open(log_file, "a", encoding='utf-8') as f:
            f.write(log_entry + "\n")

        return log_entry
