"""
Verdicts and report containers for monitors and functionals.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional


class Verdict(str, Enum):
    PASS = 'PASS'
    WARN = 'WARN'
    FAIL = 'FAIL'


WARN_FACTOR = 10.0


def verdict_for(violation: float, tolerance: float) -> Verdict:
    """PASS within tolerance, WARN within WARN_FACTOR × tolerance, else FAIL."""
    if not math.isfinite(violation):
        return Verdict.FAIL
    if violation <= tolerance:
        return Verdict.PASS
    if violation <= WARN_FACTOR * tolerance:
        return Verdict.WARN
    return Verdict.FAIL


def _plain(value: Any) -> Any:
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class CheckResult:
    name: str
    verdict: Verdict
    residual: float = 0.0
    tolerance: float = 0.0
    margin: Optional[float] = None
    order: Optional[float] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict != Verdict.FAIL

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            'name': self.name,
            'verdict': self.verdict.value,
            'residual': self.residual,
            'tolerance': self.tolerance,
            'margin': self.margin,
            'order': self.order,
            'details': self.details
        })


@dataclass
class MonitorReport:
    checks: List[CheckResult] = field(default_factory=list)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def extend(self, other: 'MonitorReport') -> None:
        self.checks.extend(other.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def names(self) -> List[str]:
        return [c.name for c in self.checks]

    @property
    def failed(self) -> List[str]:
        return [c.name for c in self.checks if c.verdict == Verdict.FAIL]

    @property
    def ok(self) -> bool:
        return not self.failed

    def to_dict(self) -> Dict[str, Any]:
        return {
            'verdict': 'PASS' if self.ok else 'FAIL',
            'checks': [c.to_dict() for c in self.checks]
        }


@dataclass
class FunctionalReport:
    """Functional values per sample time plus derivative comparisons and verdicts."""
    times: List[float] = field(default_factory=list)
    values: Dict[str, List[float]] = field(default_factory=dict)
    derivatives: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    checks: MonitorReport = field(default_factory=MonitorReport)

    def series(self, name: str) -> List[float]:
        return self.values.get(name, [])

    @property
    def ok(self) -> bool:
        return self.checks.ok

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            'times': self.times,
            'values': self.values,
            'derivatives': self.derivatives,
            'checks': self.checks.to_dict()
        })
