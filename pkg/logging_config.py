"""
Structured logging for the MLGSC toolkit.

Library modules call ``get_logger(name)`` and never attach handlers; entry
points call ``setup_logging()`` once.
"""
import functools
import json
import logging
import logging.handlers
import sys
import time
import traceback
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from config import settings

ROOT_LOGGER_NAME = 'mlgsc'


class StructuredFormatter(logging.Formatter):
    """JSON formatter carrying service metadata and extra fields."""

    def __init__(self, service_name: str, environment: str, version: str):
        super().__init__()
        self.service_name = service_name
        self.environment = environment
        self.version = version

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as structured JSON."""
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'service': self.service_name,
            'environment': self.environment,
            'version': self.version,
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        if record.exc_info:
            log_entry['exception'] = {
                'type': record.exc_info[0].__name__,
                'message': str(record.exc_info[1]),
                'traceback': traceback.format_exception(*record.exc_info)
            }

        if hasattr(record, 'extra_fields'):
            log_entry.update(record.extra_fields)

        run_id = getattr(logging.getLogger(ROOT_LOGGER_NAME), 'run_id', None)
        if run_id:
            log_entry['run_id'] = run_id

        if hasattr(record, 'execution_time'):
            log_entry['execution_time'] = record.execution_time

        return json.dumps(log_entry, ensure_ascii=False, default=str)


class PerformanceLogger:
    """Logger for stage timings and training progress."""

    def __init__(self, logger: logging.Logger):
        self.logger = logger

    def log_stage(self, stage: str, execution_time: float, success: bool,
                  error: Optional[str] = None, **fields: Any):
        """Log how long a pipeline stage took."""
        extra_fields: Dict[str, Any] = {
            'metric_type': 'stage_performance',
            'stage': stage,
            'execution_time': execution_time,
            'success': success
        }
        extra_fields.update(fields)
        if error:
            extra_fields['error'] = error

        self.logger.info(f"Stage finished: {stage}", extra={'extra_fields': extra_fields})

    def log_epoch(self, record: Dict[str, float]):
        """Log one epoch of the loss history."""
        extra_fields = {'metric_type': 'training_epoch'}
        extra_fields.update(record)
        self.logger.info(f"Epoch {int(record['epoch'])}: total loss {record['total']:.6g}",
                         extra={'extra_fields': extra_fields})


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """Configure the ``mlgsc`` logger from the environment settings."""
    log_config = settings.get_logging_config()

    logger = logging.getLogger(ROOT_LOGGER_NAME)
    logger.setLevel(getattr(logging, (level or log_config['level']).upper()))
    logger.handlers.clear()

    if log_config['format'] == 'json':
        formatter: logging.Formatter = StructuredFormatter(
            service_name=log_config['service_name'],
            environment=log_config['environment'],
            version=log_config['version']
        )
    else:
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    if log_config['output'] in ['file', 'both']:
        log_file = Path(log_config['log_file'])
        log_file.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            filename=log_file,
            maxBytes=log_config['max_file_size'],
            backupCount=log_config['backup_count'],
            encoding='utf-8'
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    if log_config['output'] in ['stderr', 'both']:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    logger.propagate = False

    return logger


def get_logger(name: str = None) -> logging.Logger:
    """Get a logger instance with the specified name."""
    if name:
        return logging.getLogger(f'{ROOT_LOGGER_NAME}.{name}')
    return logging.getLogger(ROOT_LOGGER_NAME)


def get_performance_logger(name: str = None) -> PerformanceLogger:
    """Get a performance logger instance."""
    return PerformanceLogger(get_logger(name))


class RunContext:
    """Context manager tagging every record of one run with a run id."""

    def __init__(self, run_id: str = None):
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.old_run_id = None

    def __enter__(self):
        logger = get_logger()
        self.old_run_id = getattr(logger, 'run_id', None)
        logger.run_id = self.run_id
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        logger = get_logger()
        if self.old_run_id is not None:
            logger.run_id = self.old_run_id
        elif hasattr(logger, 'run_id'):
            delattr(logger, 'run_id')


def log_function_call(func):
    """Decorator logging the duration and outcome of a pipeline stage."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = get_logger(func.__module__)
        perf_logger = PerformanceLogger(logger)

        start_time = time.perf_counter()
        success = True
        error = None

        try:
            return func(*args, **kwargs)
        except Exception as e:
            success = False
            error = str(e)
            logger.error(f"Stage {func.__name__} failed: {error}")
            raise
        finally:
            perf_logger.log_stage(
                stage=func.__name__,
                execution_time=time.perf_counter() - start_time,
                success=success,
                error=error
            )

    return wrapper
