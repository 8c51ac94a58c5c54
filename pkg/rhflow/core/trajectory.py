"""
Types shared by the homogeneous and grid integrators: coupling schedules,
singularity reports and the scalar diagnostic series both trajectories expose.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class CouplingSchedule:
    """Coupling function α(t): constant, or piecewise linear through knots."""
    kind: str
    times: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ('constant', 'piecewise-linear'):
            raise ValueError(f"unknown schedule kind '{self.kind}'")
        if len(self.times) != len(self.values) or not self.values:
            raise ValueError("schedule needs matching, non-empty times and values")
        if self.kind == 'constant' and len(self.values) != 1:
            raise ValueError("constant schedule takes exactly one value")
        if any(v < 0 for v in self.values):
            raise ValueError("coupling values must be non-negative")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("schedule times must be strictly increasing")

    @classmethod
    def constant(cls, value: float) -> 'CouplingSchedule':
        return cls('constant', (0.0,), (float(value),))

    @classmethod
    def piecewise_linear(cls, times: Sequence[float], values: Sequence[float]) -> 'CouplingSchedule':
        return cls('piecewise-linear', tuple(float(t) for t in times), tuple(float(v) for v in values))

    def __call__(self, t: float) -> float:
        if self.kind == 'constant':
            return self.values[0]
        return float(np.interp(t, self.times, self.values))

    def derivative(self, t: float) -> float:
        """Right derivative α̇(t); zero outside the knot range."""
        if self.kind == 'constant' or t < self.times[0] or t >= self.times[-1]:
            return 0.0
        k = int(np.searchsorted(self.times, t, side='right')) - 1
        return (self.values[k + 1] - self.values[k]) / (self.times[k + 1] - self.times[k])

    def minimum(self, t0: float, t1: float) -> float:
        inside = [v for s, v in zip(self.times, self.values) if t0 <= s <= t1]
        return min([self(t0), self(t1)] + inside)

    def maximum(self, t0: float, t1: float) -> float:
        inside = [v for s, v in zip(self.times, self.values) if t0 <= s <= t1]
        return max([self(t0), self(t1)] + inside)

    @property
    def is_non_increasing(self) -> bool:
        return all(b <= a for a, b in zip(self.values, self.values[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'times': list(self.times), 'values': list(self.values)}


def time_derivative(values: np.ndarray, times: np.ndarray, order: int = 4) -> np.ndarray:
    """Central differences along axis 0.

    order=4 uses the five-point stencil wherever the surrounding samples are
    uniformly spaced and falls back to second-order differences elsewhere.
    """
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise ValueError("time differences need at least three samples")
    out = np.gradient(values, times, axis=0, edge_order=2)
    if order < 4 or len(times) < 5:
        return out
    steps = np.diff(times)
    for i in range(2, len(times) - 2):
        local = steps[i - 2:i + 2]
        if np.max(np.abs(local - local[0])) <= 1e-9 * abs(local[0]):
            h = local[0]
            out[i] = (values[i - 2] - 8 * values[i - 1] + 8 * values[i + 1] - values[i + 2]) / (12 * h)
    return out


@dataclass
class SingularityReport:
    """Why and when a run stopped before t_end."""
    t: float
    reason: str
    last_state: Any = None
    diagnostics: Dict[str, float] = field(default_factory=dict)
    exceeded: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            't_sing': self.t,
            'reason': self.reason,
            'exceeded': list(self.exceeded),
            'diagnostics': dict(self.diagnostics),
            'last_valid_t': getattr(self.last_state, 't', None)
        }


@dataclass(frozen=True)
class DiagnosticSeries:
    """Sup/inf diagnostics per time, the input to the maximum-principle checks."""
    dim: int
    t: np.ndarray
    vol: np.ndarray
    s_min: np.ndarray
    s_max: np.ndarray
    r_max: np.ndarray
    energy_max: np.ndarray
    rm_max: np.ndarray
    hess_max: np.ndarray
    alpha: np.ndarray
    alpha_dot: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_rows(cls, dim: int, rows: Sequence[Dict[str, float]]) -> 'DiagnosticSeries':
        keys = ('t', 'vol', 's_min', 's_max', 'r_max', 'energy_max', 'rm_max', 'hess_max', 'alpha', 'alpha_dot')
        return cls(dim, *(np.array([row[k] for row in rows], dtype=float) for k in keys))
