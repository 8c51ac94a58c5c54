"""
Centralized error handling for rhflow: exception hierarchy and exit-code mapping.
"""

import logging
from typing import Dict, List, Optional, Any
from collections import defaultdict
from datetime import datetime

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_SINGULARITY = 3
EXIT_MONITOR_FAIL = 4


class RHFlowError(RuntimeError):
    """Base class for all rhflow errors."""


class ConfigError(RHFlowError, ValueError):
    """Schema violation in a run configuration."""

    def __init__(self, key: str, constraint: str):
        self.key = key
        self.constraint = constraint
        super().__init__(f"{key}: {constraint}")


class DegenerateMetricError(RHFlowError):
    """Metric lost positive-definiteness at some node."""

    def __init__(self, node: tuple, eigenvalue: float):
        self.node = node
        self.eigenvalue = eigenvalue
        super().__init__(f"metric not positive-definite at node {node} (eigenvalue {eigenvalue:.3e})")


class ConstraintViolationError(RHFlowError):
    """Map field off its target, or a variation not tangent to it."""

    def __init__(self, message: str, node: Optional[tuple] = None, violation: float = float('nan')):
        self.node = node
        self.violation = violation
        super().__init__(message)


class NoClosedFormError(RHFlowError):
    pass


class ConvergenceError(RHFlowError):
    """Iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, residual: float, best: Any = None):
        self.residual = residual
        self.best = best
        super().__init__(f"{message} (residual {residual:.3e})")


class InsufficientSamplesError(RHFlowError):
    pass


class CoverageError(RHFlowError):
    """A path or query leaves the time range covered by a trajectory."""


class CheckpointError(RHFlowError):
    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class NegativeDensityError(RHFlowError):
    pass


class MonitorFailure(RHFlowError):
    """Raised by commands when a report carries a FAIL verdict."""

    def __init__(self, failed: List[str]):
        self.failed = failed
        super().__init__(f"monitor checks failed: {', '.join(failed)}")


class ErrorHandler:
    """Maps errors to exit codes and keeps per-command error statistics."""

    def __init__(self, logger: logging.Logger):
        """Initialize the error handler.

        Args:
            logger: Logger instance for error logging
        """
        self.logger = logger
        self.error_counts: Dict[str, int] = defaultdict(int)
        self.last_errors: Dict[str, List[dict]] = defaultdict(list)
        self.MAX_ERROR_HISTORY = 10

    def exit_code_for(self, error: BaseException) -> int:
        if isinstance(error, ConfigError):
            return EXIT_CONFIG
        if isinstance(error, MonitorFailure):
            return EXIT_MONITOR_FAIL
        return EXIT_FAILURE

    def handle_command_error(self, error: Exception, command_name: str) -> int:
        """Record and log a command failure.

        Args:
            error: The error that occurred
            command_name: Name of the command that failed

        Returns:
            int: Process exit code for this error
        """
        error_key = f"{command_name}:{type(error).__name__}"
        self.error_counts[error_key] += 1

        self.last_errors[error_key].append({
            'timestamp': datetime.now(),
            'error': str(error),
            'type': type(error).__name__,
        })
        self.last_errors[error_key] = self.last_errors[error_key][-self.MAX_ERROR_HISTORY:]

        code = self.exit_code_for(error)
        if code == EXIT_CONFIG:
            # schema problems are user errors; no traceback
            self.logger.error(f"Invalid configuration: {error}")
        elif code == EXIT_MONITOR_FAIL:
            self.logger.error(f"Command '{command_name}' finished with failed checks: {error}")
        else:
            self.logger.error(
                f"Command '{command_name}' failed",
                extra={'command': command_name, 'error': str(error)},
                exc_info=error
            )
        return code

    def get_error_stats(self, command_name: Optional[str] = None) -> Dict[str, Any]:
        """Get error statistics for one command or globally.

        Args:
            command_name: Optional command name to filter stats

        Returns:
            Dictionary containing error statistics
        """
        stats: Dict[str, Any] = {
            'total_errors': 0,
            'errors_by_type': defaultdict(int),
            'recent_errors': []
        }

        for error_key, count in self.error_counts.items():
            command, error_type = error_key.split(':', 1)
            if command_name is None or command == command_name:
                stats['total_errors'] += count
                stats['errors_by_type'][error_type] += count

        for error_key, errors in self.last_errors.items():
            if command_name is None or error_key.startswith(f"{command_name}:"):
                stats['recent_errors'].extend(errors)

        stats['recent_errors'] = sorted(
            stats['recent_errors'],
            key=lambda x: x['timestamp'],
            reverse=True
        )[:self.MAX_ERROR_HISTORY]
        stats['errors_by_type'] = dict(stats['errors_by_type'])
        return stats

    def clear_error_history(self) -> None:
        self.error_counts.clear()
        self.last_errors.clear()
