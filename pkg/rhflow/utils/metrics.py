"""
Metrics collection for rhflow runs.
"""

from typing import Dict, List, Any
from collections import defaultdict


def _summary(times: List[float]) -> Dict[str, float]:
    return {
        'avg': sum(times) / len(times) if times else 0,
        'min': min(times) if times else 0,
        'max': max(times) if times else 0,
        'total': sum(times),
        'count': len(times)
    }


class MetricsManager:
    """Timing, solver and stepping statistics."""

    def __init__(self):
        self.phase_times: Dict[str, List[float]] = defaultdict(list)
        self.solver_iterations: Dict[str, List[int]] = defaultdict(list)
        self.errors_count: Dict[str, int] = defaultdict(int)
        self.accepted_steps: int = 0
        self.rejected_steps: int = 0
        self.cache_stats: Dict[str, Any] = {}
        self.max_history_size = 10000

    def track_phase(self, name: str, seconds: float) -> None:
        """Track wall time of a named phase (command, solve, run).

        Args:
            name: Phase name
            seconds: Elapsed wall time
        """
        self.phase_times[name].append(seconds)
        if len(self.phase_times[name]) > self.max_history_size:
            self.phase_times[name] = self.phase_times[name][-self.max_history_size:]

    def track_solver(self, solver: str, iterations: int) -> None:
        self.solver_iterations[solver].append(int(iterations))
        if len(self.solver_iterations[solver]) > self.max_history_size:
            self.solver_iterations[solver] = self.solver_iterations[solver][-self.max_history_size:]

    def track_step(self, accepted: bool) -> None:
        if accepted:
            self.accepted_steps += 1
        else:
            self.rejected_steps += 1

    def track_error(self, error_type: str) -> None:
        self.errors_count[error_type] += 1

    def update_cache_stats(self, stats: Dict[str, Any]) -> None:
        self.cache_stats = stats

    def get_metrics_report(self) -> Dict[str, Any]:
        """Generate the metrics report written next to run artifacts.

        Returns:
            Dictionary containing all tracked metrics
        """
        return {
            'phases': {name: _summary(times) for name, times in self.phase_times.items()},
            'solvers': {
                name: {
                    'calls': len(its),
                    'avg_iterations': sum(its) / len(its) if its else 0,
                    'max_iterations': max(its) if its else 0
                }
                for name, its in self.solver_iterations.items()
            },
            'stepping': {
                'accepted': self.accepted_steps,
                'rejected': self.rejected_steps
            },
            'error_statistics': {
                'total_errors': sum(self.errors_count.values()),
                'errors_by_type': dict(self.errors_count)
            },
            'cache_performance': self.cache_stats
        }

    def reset_metrics(self) -> None:
        self.__init__()
