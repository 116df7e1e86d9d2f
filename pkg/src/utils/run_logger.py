"""
Run Logging System for Cascade Experiments

This module provides structured run logging including:
- Training step, checkpoint and sample events with run context
- Error logging with detailed context information
- Log rotation and file management
- Run log filtering and summary statistics
"""

import os
import json
import logging
import traceback
from datetime import datetime
from typing import Dict, List, Optional, Any, Union
from logging.handlers import RotatingFileHandler
import threading
from dataclasses import dataclass, asdict
from enum import Enum


class RunEventType(Enum):
    """Enumeration of run event types"""
    RUN_STARTED = "run_started"
    TRAIN_STEP = "train_step"
    CHECKPOINT_SAVED = "checkpoint_saved"
    SAMPLE_WRITTEN = "sample_written"
    EVAL_REPORT = "eval_report"
    COMPARE_TABLE = "compare_table"
    CHECK_RESULT = "check_result"
    NON_FINITE_LOSS = "non_finite_loss"
    WARNING = "warning"
    ERROR = "error"
    SYSTEM_EVENT = "system_event"


@dataclass
class RunLogEntry:
    """
    Represents a single run log entry with all relevant information
    """
    timestamp: datetime
    event_type: RunEventType
    run_id: Optional[str]
    operation: str
    success: bool
    details: Dict[str, Any]
    step: Optional[int] = None
    error_message: Optional[str] = None
    duration_ms: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert run entry to dictionary for JSON serialization"""
        result = asdict(self)
        result['timestamp'] = self.timestamp.isoformat()
        result['event_type'] = self.event_type.value
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunLogEntry':
        """Create run entry from dictionary"""
        data = dict(data)
        data['timestamp'] = datetime.fromisoformat(data['timestamp'])
        data['event_type'] = RunEventType(data['event_type'])
        return cls(**data)


class RunLogger:
    """
    Structured JSON-lines logger for training, sampling and evaluation runs,
    with log rotation and filtering
    """

    def __init__(self,
                 log_directory: str = "logs",
                 log_file: str = "runs.log",
                 max_file_size: int = 10 * 1024 * 1024,  # 10MB
                 backup_count: int = 5,
                 log_level: int = logging.INFO,
                 echo: bool = False):
        """
        Initialize run logger with configuration

        Args:
            log_directory: Directory to store log files
            log_file: Name of the main log file
            max_file_size: Maximum size of log file before rotation (bytes)
            backup_count: Number of backup files to keep
            log_level: Logging level
            echo: Also print a one-line summary of each event to stderr
        """
        self.log_directory = log_directory
        self.log_file = log_file
        self.max_file_size = max_file_size
        self.backup_count = backup_count
        self.log_level = log_level
        self.echo = echo

        # Thread lock for concurrent access
        self._lock = threading.Lock()

        os.makedirs(log_directory, exist_ok=True)
        self._setup_logger()

        self.log_system_event("run_logger_initialized", {
            "log_directory": log_directory,
            "log_file": log_file,
            "max_file_size": max_file_size,
            "backup_count": backup_count
        })

    def _setup_logger(self) -> None:
        """Set up the logging configuration with rotation"""
        log_path = os.path.join(self.log_directory, self.log_file)

        self.logger = logging.getLogger('cascade_run_logger')
        self.logger.setLevel(self.log_level)

        # Remove existing handlers to avoid duplicates
        for handler in self.logger.handlers[:]:
            handler.close()
            self.logger.removeHandler(handler)

        handler = RotatingFileHandler(
            log_path,
            maxBytes=self.max_file_size,
            backupCount=self.backup_count,
            encoding='utf-8'
        )
        formatter = logging.Formatter(
            '%(asctime)s | %(levelname)s | %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        handler.setFormatter(formatter)
        self.logger.addHandler(handler)

        if self.echo:
            console = logging.StreamHandler()
            console.setFormatter(logging.Formatter('%(levelname)s | %(message)s'))
            console.setLevel(logging.WARNING)
            self.logger.addHandler(console)

        self.logger.propagate = False

    def close(self) -> None:
        for handler in self.logger.handlers[:]:
            handler.close()
            self.logger.removeHandler(handler)

    def log_operation(self,
                      event_type: Union[RunEventType, str],
                      operation: str,
                      success: bool = True,
                      details: Optional[Dict[str, Any]] = None,
                      run_id: Optional[str] = None,
                      step: Optional[int] = None,
                      duration_ms: Optional[int] = None,
                      error_message: Optional[str] = None) -> None:
        """
        Log a run operation with full context

        Args:
            event_type: Type of event being logged
            operation: Description of the operation
            success: Whether the operation was successful
            details: Additional operation details
            run_id: Config hash identifying the run
            step: Training step, if applicable
            duration_ms: Operation duration in milliseconds
            error_message: Error text for failed operations
        """
        with self._lock:
            if isinstance(event_type, str):
                try:
                    event_type = RunEventType(event_type)
                except ValueError:
                    event_type = RunEventType.SYSTEM_EVENT

            entry = RunLogEntry(
                timestamp=datetime.now(),
                event_type=event_type,
                run_id=run_id,
                operation=operation,
                success=success,
                details=details or {},
                step=step,
                duration_ms=duration_ms,
                error_message=error_message
            )
            self._write_log_entry(entry)

    def log_run_started(self, command: str, run_id: str, details: Optional[Dict[str, Any]] = None) -> None:
        self.log_operation(RunEventType.RUN_STARTED, f"Run started: {command}",
                           details=details, run_id=run_id)

    def log_train_step(self, run_id: str, step: int, loss: float,
                       metrics: Optional[Dict[str, float]] = None) -> None:
        """
        Log one logged training step

        Args:
            run_id: Config hash of the run
            step: Step number
            loss: Training loss at this step
            metrics: Evaluation metrics computed at this step, if any
        """
        details: Dict[str, Any] = {"loss": loss}
        if metrics:
            details["metrics"] = metrics
        self.log_operation(RunEventType.TRAIN_STEP, f"Training step {step}",
                           details=details, run_id=run_id, step=step)

    def log_checkpoint(self, run_id: str, path: str, step: int, groups: List[str]) -> None:
        self.log_operation(RunEventType.CHECKPOINT_SAVED, f"Checkpoint saved: {path}",
                           details={"path": path, "groups": groups}, run_id=run_id, step=step)

    def log_non_finite(self, run_id: str, step: int, diagnostic_path: str) -> None:
        self.log_operation(RunEventType.NON_FINITE_LOSS, f"Non-finite loss at step {step}", success=False,
                           details={"diagnostic_path": diagnostic_path}, run_id=run_id, step=step,
                           error_message="non-finite loss")

    def log_warning(self, message: str, details: Optional[Dict[str, Any]] = None,
                    run_id: Optional[str] = None) -> None:
        self.log_operation(RunEventType.WARNING, message, success=False, details=details,
                           run_id=run_id, error_message=message)

    def log_error(self,
                  error: BaseException,
                  operation: Optional[str] = None,
                  run_id: Optional[str] = None,
                  duration_ms: Optional[int] = None,
                  details: Optional[Dict[str, Any]] = None) -> None:
        """
        Log errors with detailed context information

        Args:
            error: Exception that occurred
            operation: Operation being performed when the error occurred
            run_id: Run identifier
            duration_ms: Time spent before failing
            details: Context information about the error
        """
        context = {
            "error_type": type(error).__name__,
            "error_message": str(error),
            "context": details or {}
        }
        stack_trace = traceback.format_exc()
        context["stack_trace"] = stack_trace[:1000] + "..." if len(stack_trace) > 1000 else stack_trace

        self.log_operation(
            event_type=RunEventType.ERROR,
            operation=operation or f"Error occurred: {type(error).__name__}",
            success=False,
            details=context,
            run_id=run_id,
            duration_ms=duration_ms,
            error_message=str(error)
        )

    def log_system_event(self, event: str, details: Optional[Dict[str, Any]] = None) -> None:
        self.log_operation(
            event_type=RunEventType.SYSTEM_EVENT,
            operation=f"System event: {event}",
            success=True,
            details=details or {}
        )

    def _write_log_entry(self, entry: RunLogEntry) -> None:
        try:
            log_message = json.dumps(entry.to_dict(), ensure_ascii=False, default=str)
            if entry.success:
                self.logger.info(log_message)
            elif entry.event_type == RunEventType.WARNING:
                self.logger.warning(log_message)
            else:
                self.logger.error(log_message)
        except Exception as e:
            fallback_message = f"RUN_LOG_ERROR: {entry.operation} | Run: {entry.run_id} | Error: {str(e)}"
            self.logger.error(fallback_message)

    def get_run_logs(self,
                     filters: Optional[Dict[str, Any]] = None,
                     limit: int = 1000) -> List[RunLogEntry]:
        """
        Retrieve run log entries, newest first

        Args:
            filters: Optional keys event_type (str or list), run_id, success
            limit: Maximum number of entries to return

        Returns:
            List of run log entries matching criteria
        """
        for handler in self.logger.handlers:
            handler.flush()

        entries: List[RunLogEntry] = []
        log_path = os.path.join(self.log_directory, self.log_file)
        log_files = [log_path] + [f"{log_path}.{i}" for i in range(1, self.backup_count + 1)]

        for log_file in log_files:
            if not os.path.exists(log_file):
                continue
            with open(log_file, 'r', encoding='utf-8') as f:
                for line in reversed(f.readlines()):
                    if len(entries) >= limit:
                        break
                    try:
                        if '|' in line and '{' in line:
                            json_part = line.split('|', 2)[-1].strip()
                            entry = RunLogEntry.from_dict(json.loads(json_part))
                            if self._matches_filters(entry, filters):
                                entries.append(entry)
                    except (json.JSONDecodeError, ValueError, KeyError, TypeError):
                        continue
            if len(entries) >= limit:
                break

        return entries[:limit]

    def _matches_filters(self, entry: RunLogEntry, filters: Optional[Dict[str, Any]]) -> bool:
        if not filters:
            return True
        for key, value in filters.items():
            if key == 'event_type':
                allowed = [value] if isinstance(value, str) else list(value)
                if entry.event_type.value not in allowed:
                    return False
            elif key == 'run_id' and entry.run_id != value:
                return False
            elif key == 'success' and entry.success != value:
                return False
        return True

    def get_statistics(self, run_id: Optional[str] = None) -> Dict[str, Any]:
        """
        Summarize logged events

        Args:
            run_id: Restrict to a single run

        Returns:
            Dictionary containing event counts
        """
        filters = {'run_id': run_id} if run_id else None
        entries = self.get_run_logs(filters=filters, limit=100000)
        stats: Dict[str, Any] = {
            'total_events': len(entries),
            'failed_operations': sum(1 for e in entries if not e.success),
            'error_count': sum(1 for e in entries if e.event_type == RunEventType.ERROR),
            'event_types': {},
        }
        for entry in entries:
            key = entry.event_type.value
            stats['event_types'][key] = stats['event_types'].get(key, 0) + 1
        return stats


# Global run logger instance
_run_logger_instance: Optional[RunLogger] = None


def get_run_logger() -> RunLogger:
    """
    Get the global run logger instance (singleton pattern)

    Returns:
        RunLogger instance
    """
    global _run_logger_instance

    if _run_logger_instance is None:
        _run_logger_instance = RunLogger(log_directory=os.getenv("CASCADE_LOG_DIR", "logs"))

    return _run_logger_instance


def initialize_run_logger(log_directory: str = "logs",
                          log_file: str = "runs.log",
                          max_file_size: int = 10 * 1024 * 1024,
                          backup_count: int = 5,
                          echo: bool = False) -> RunLogger:
    """
    Initialize the global run logger with custom configuration

    Args:
        log_directory: Directory to store log files
        log_file: Name of the main log file
        max_file_size: Maximum size of log file before rotation
        backup_count: Number of backup files to keep
        echo: Mirror warnings and errors to stderr

    Returns:
        Configured RunLogger instance
    """
    global _run_logger_instance

    if _run_logger_instance is not None:
        _run_logger_instance.close()
    _run_logger_instance = RunLogger(
        log_directory=log_directory,
        log_file=log_file,
        max_file_size=max_file_size,
        backup_count=backup_count,
        echo=echo
    )

    return _run_logger_instance
