"""
Result artifacts: the per-sample CSV series, JSON reports and the resolved config echo.

The CSV column order is frozen:

    t, vol, S_min, S_max, sup_grad_phi2, sup_Rm, F, lambda, lambda_bar, mu, W

Values are written with 17 significant digits; a functional that was not
evaluated at a sample leaves its cell empty.
"""

import csv
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, List, Optional, Union

from .config import RunConfig, write_resolved
from .deturck import Trajectory
from .homogeneous import HomTrajectory
from .reports import FunctionalReport

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('t', 'vol', 'S_min', 'S_max', 'sup_grad_phi2', 'sup_Rm', 'F', 'lambda', 'lambda_bar', 'mu', 'W')
_DIAGNOSTIC_COLUMNS = {
    't': 't', 'vol': 'vol', 'S_min': 's_min', 'S_max': 's_max',
    'sup_grad_phi2': 'energy_max', 'sup_Rm': 'rm_max',
}
_FUNCTIONAL_COLUMNS = ('F', 'lambda', 'lambda_bar', 'mu', 'W')


def format_value(value: Optional[float]) -> str:
    if value is None:
        return ''
    return format(float(value), '.17g')


def _functional_lookup(report: Optional[FunctionalReport]) -> Dict[str, Dict[float, float]]:
    lookup: Dict[str, Dict[float, float]] = {name: {} for name in _FUNCTIONAL_COLUMNS}
    if report is None:
        return lookup
    adjoint_times = report.values.get('adjoint_times')
    for name in _FUNCTIONAL_COLUMNS:
        values = report.series(name)
        if not values:
            continue
        # F and W along grid runs live on every sample of the adjoint solve
        times = adjoint_times if adjoint_times is not None and name in ('F', 'W') else report.times
        lookup[name] = {float(t): float(v) for t, v in zip(times, values)}
    return lookup


def series_rows(traj: Union[Trajectory, HomTrajectory],
                functionals: Optional[FunctionalReport] = None) -> List[Dict[str, Optional[float]]]:
    """One row per trajectory sample, keyed by CSV column."""
    if isinstance(traj, HomTrajectory):
        series = traj.diagnostic_series()
        diagnostics = [{key: float(getattr(series, key)[i]) for key in _DIAGNOSTIC_COLUMNS.values()}
                       for i in range(len(series))]
    else:
        by_time = {row['t']: row for row in traj.diagnostics}
        diagnostics = [by_time[s.t] for s in traj.samples if s.t in by_time]
    lookup = _functional_lookup(functionals)
    rows = []
    for diag in diagnostics:
        row: Dict[str, Optional[float]] = {col: diag[key] for col, key in _DIAGNOSTIC_COLUMNS.items()}
        for name in _FUNCTIONAL_COLUMNS:
            row[name] = lookup[name].get(float(diag['t']))
        rows.append(row)
    return rows


def write_series_csv(path: str, rows: Iterable[Dict[str, Optional[float]]]) -> int:
    count = 0
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([format_value(row.get(col)) for col in CSV_COLUMNS])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return count


def _json_ready(value: Any) -> Any:
    if hasattr(value, 'tolist'):
        return _json_ready(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    return value


def write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_json_ready(payload), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug(f"Wrote {path}")


class ArtifactWriter:
    """Places every artifact of one command under a single output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.written: List[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def resolved_config(self, config: RunConfig) -> str:
        path = self.path('resolved_config.yaml')
        write_resolved(config, path)
        self.written.append(path)
        return path

    def csv(self, name: str, rows: Iterable[Dict[str, Optional[float]]]) -> str:
        path = self.path(name)
        write_series_csv(path, rows)
        self.written.append(path)
        return path

    def json(self, name: str, payload: Dict[str, Any]) -> str:
        path = self.path(name)
        write_json(path, payload)
        self.written.append(path)
        return path

    def checkpoint_dir(self, name: str) -> str:
        path = self.path(name)
        os.makedirs(path, exist_ok=True)
        return path
