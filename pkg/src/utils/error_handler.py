"""
Error Handling for the Self-Cascade Diffusion Toolkit

This module defines the exception hierarchy raised by every public operation
and the helpers that turn those exceptions into context-aware command-line
messages with suggestions.
"""

from datetime import datetime
from typing import Any, Dict, List, Optional


class CascadeError(ValueError):
    """Base class for all errors raised by the toolkit"""


class ShapeError(CascadeError):
    """Tensor shapes or spatial extents are incompatible"""


class NonFiniteError(CascadeError):
    """An operation produced NaN or Inf values"""

    def __init__(self, message: str, diagnostic_path: Optional[str] = None):
        super().__init__(message)
        self.diagnostic_path = diagnostic_path


class ScheduleError(CascadeError):
    """Invalid noise schedule or timestep"""


class PlanError(CascadeError):
    """A cascade resolution plan cannot be built"""


class DataError(CascadeError):
    """Invalid scene spec, corpus or image input"""


class ConfigError(CascadeError):
    """Invalid run configuration; carries the first offending field"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(CascadeError):
    """Checkpoint archive is incompatible; carries the mismatched tensor or group"""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        super().__init__(message)
        self.tensor_name = tensor_name


# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the stable CLI exit code contract"""
    if isinstance(error, (ConfigError, PlanError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


class ErrorHandler:
    """
    Centralized error formatting with context-aware messages and suggestions
    """

    COMMAND_SUGGESTIONS = {
        'train': ['train', 'tune', 'fit', 'finetune', 'pretrain'],
        'sample': ['sample', 'generate', 'infer', 'inference'],
        'eval': ['eval', 'evaluate', 'metrics', 'score'],
        'compare': ['compare', 'table', 'benchmark', 'arms'],
        'plan': ['plan', 'stages', 'cascade'],
        'export': ['export', 'extract', 'dump'],
        'check': ['check', 'verify', 'invariants', 'selftest'],
    }

    @staticmethod
    def handle_command_not_found(command: str) -> str:
        """
        Handle unknown command with suggestions

        Args:
            command: The invalid command

        Returns:
            Formatted error message with command suggestions
        """
        message = f"Unknown command: '{command}'\n"
        message += "=" * 50 + "\n"

        suggestions = ErrorHandler._find_similar_commands(command)
        if suggestions:
            message += "Did you mean:\n"
            for suggestion in suggestions:
                message += f"  - {suggestion}\n"

        message += "\nAvailable commands:\n"
        message += "  - train   --config <path>\n"
        message += "  - sample  --config <path> --checkpoint <path> --n <count> --seed <int>\n"
        message += "  - eval    --config <path> --checkpoint <path>\n"
        message += "  - compare --config <experiment.json>\n"
        message += "  - plan    --config <path>\n"
        message += "  - export  --checkpoint <path> --group <name> --out <path>\n"
        message += "  - check   [--quick]\n"
        message += "\nFor detailed help: python main.py <command> --help\n"
        return message

    @staticmethod
    def handle_config_error(error: ConfigError) -> str:
        """
        Handle an invalid configuration field

        Args:
            error: The ConfigError raised during loading or validation

        Returns:
            Formatted error message naming the first offending field
        """
        message = f"Invalid configuration field: {error.field}\n"
        message += "=" * 50 + "\n"
        message += f"{error}\n"
        message += "\nOverride a single field with: --override section.field=value\n"
        return message

    @staticmethod
    def handle_checkpoint_error(error: CheckpointError) -> str:
        """Format an incompatible checkpoint message naming the tensor"""
        message = "Incompatible checkpoint\n"
        message += "=" * 50 + "\n"
        if error.tensor_name:
            message += f"Mismatched tensor: {error.tensor_name}\n"
        message += f"{error}\n"
        message += "\nThe checkpoint must be produced with the same unet and upsampler config.\n"
        return message

    @staticmethod
    def handle_non_finite(error: NonFiniteError) -> str:
        """Format a non-finite loss message pointing at the diagnostic dump"""
        message = "Non-finite values encountered\n"
        message += "=" * 50 + "\n"
        message += f"{error}\n"
        if error.diagnostic_path:
            message += f"Diagnostic snapshot written to: {error.diagnostic_path}\n"
        message += "\nTry a smaller learning rate: --override train.lr=1e-5\n"
        return message

    @staticmethod
    def format_error(error: BaseException) -> str:
        """Pick the most specific formatter for an exception"""
        if isinstance(error, ConfigError):
            return ErrorHandler.handle_config_error(error)
        if isinstance(error, CheckpointError):
            return ErrorHandler.handle_checkpoint_error(error)
        if isinstance(error, NonFiniteError):
            return ErrorHandler.handle_non_finite(error)
        return f"Error: {error}\n"

    @staticmethod
    def suggest_command_fix(invalid_command: str) -> str:
        """
        Suggest command fixes for common typos and mistakes

        Args:
            invalid_command: The invalid command entered

        Returns:
            Suggestion string or empty if no suggestions
        """
        suggestions = ErrorHandler._find_similar_commands(invalid_command)
        if not suggestions:
            return ""
        if len(suggestions) == 1:
            return f"Did you mean: {suggestions[0]}?"
        return f"Did you mean: {', '.join(suggestions[:3])}?"

    @staticmethod
    def _find_similar_commands(command: str) -> List[str]:
        """Find commands similar to the given command"""
        suggestions = []
        command_lower = command.lower()

        for correct_cmd, variations in ErrorHandler.COMMAND_SUGGESTIONS.items():
            for variation in variations:
                if ErrorHandler._calculate_similarity(command_lower, variation) > 0.6:
                    if correct_cmd not in suggestions:
                        suggestions.append(correct_cmd)

        return suggestions[:3]

    @staticmethod
    def _calculate_similarity(str1: str, str2: str) -> float:
        """
        Calculate similarity between two strings using simple algorithm

        Returns:
            Similarity score between 0 and 1
        """
        if str1 == str2:
            return 1.0

        if len(str1) == 0 or len(str2) == 0:
            return 0.0

        matches = 0
        total_chars = max(len(str1), len(str2))

        for i in range(min(len(str1), len(str2))):
            if str1[i] == str2[i]:
                matches += 1

        if str1 in str2 or str2 in str1:
            matches += min(len(str1), len(str2)) * 0.5

        return min(matches / total_chars, 1.0)


class ErrorContext:
    """
    Context manager that records failures of an operation in the run log
    """

    def __init__(self, operation: str, run_id: Optional[str] = None,
                 additional_info: Optional[Dict[str, Any]] = None):
        """
        Initialize error context

        Args:
            operation: Name of the operation being performed
            run_id: Run identifier (config hash) if available
            additional_info: Additional context information
        """
        self.operation = operation
        self.run_id = run_id
        self.additional_info = additional_info or {}
        self.start_time = datetime.now()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None and not issubclass(exc_type, (KeyboardInterrupt, SystemExit)):
            from src.utils.run_logger import get_run_logger

            duration = datetime.now() - self.start_time
            get_run_logger().log_error(
                operation=self.operation,
                error=exc_val,
                run_id=self.run_id,
                duration_ms=int(duration.total_seconds() * 1000),
                details=self.additional_info,
            )
        return False
