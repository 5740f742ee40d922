import os
import sys
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Optional, Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(log_level: Optional[str] = None, log_dir: Optional[Union[str, Path]] = None):
    """Configure logging for the pipeline"""
    # Flag value first, then the environment
    log_level = log_level or os.environ.get('LOG_LEVEL', 'INFO')
    numeric_level = getattr(logging, str(log_level).upper(), None)
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    # Configure root logger
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]

    log_dir = log_dir or os.environ.get('LOG_DIR')
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, 'birdsong.log'),
            maxBytes=10485760,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)

    logging.basicConfig(level=numeric_level, format=LOG_FORMAT, handlers=handlers, force=True)


def run_app(argv: Optional[List[str]] = None):
    """Main function to run the pipeline CLI"""
    from .cli import main
    sys.exit(main(argv))


if __name__ == '__main__':
    run_app()
