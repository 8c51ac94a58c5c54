"""
The `functionals` and `reduced-volume` commands.
"""

import logging
from typing import TYPE_CHECKING, List

import numpy as np

from ..core.config import RunConfig
from ..core.deturck import Trajectory
from ..core.functionals import (
    first_variation_check, lambda_upper_bound_check, monotonicity_series, normalize_potential,
    tangent_projection,
)
from ..core.grid_tensor import GridGeometry
from ..core.homogeneous import HomTrajectory
from ..core.monitors import (
    HOMOGENEOUS_TOLERANCE, d_quantity_check, hom_d_quantity, random_vector_fields,
)
from ..core.outputs import series_rows
from ..core.reduced_volume import reduced_volume_series
from ..core.reports import CheckResult, MonitorReport, Verdict, verdict_for
from ..utils.error_handler import EXIT_MONITOR_FAIL, EXIT_OK, EXIT_SINGULARITY

if TYPE_CHECKING:
    from ..lab import RHFlowLab

logger = logging.getLogger(__name__)

VARIATION_DIRECTIONS = 20
D_QUANTITY_FIELDS = 50


def smooth_field(geom: GridGeometry, components: int, rng: np.random.Generator, modes: int = 2) -> np.ndarray:
    """Random low-mode trigonometric field with `components` entries per node."""
    coords = geom.coordinates()
    out = np.zeros(geom.shape + (components,))
    for c in range(components):
        for _ in range(3):
            k = rng.integers(-modes, modes + 1, size=geom.dim)
            phase = rng.uniform(0, 2 * np.pi)
            out[..., c] += rng.normal() * np.cos(sum(kk * x for kk, x in zip(k, coords)) + phase)
    return out / 3


def _exit_code(traj, checks: MonitorReport) -> int:
    if not checks.ok:
        return EXIT_MONITOR_FAIL
    return EXIT_SINGULARITY if traj.singularity is not None else EXIT_OK


class AnalysisCommands:
    """Functional series and reduced-volume analysis on a freshly integrated run."""

    def __init__(self, lab: 'RHFlowLab'):
        self.lab = lab

    def variation_checks(self, traj: Trajectory, config: RunConfig) -> List[CheckResult]:
        """First variations of F and W at the initial state along random smooth directions."""
        state = traj.samples[0]
        geom, target = state.geom, state.target
        alpha = traj.schedule(state.t)
        tau = config.functionals.tau_horizon or 1.0
        rng = np.random.default_rng(config.seed)
        m = geom.dim
        f = normalize_potential(geom, state.g, 0.3 * smooth_field(geom, 1, rng)[..., 0])
        f_tau = normalize_potential(geom, state.g, f, tau)
        checks = []
        for name, potential, tau_arg in (('F', f, None), ('W', f_tau, tau)):
            results = []
            for _ in range(VARIATION_DIRECTIONS):
                h = smooth_field(geom, m * m, rng).reshape(geom.shape + (m, m))
                h = 0.5 * (h + np.swapaxes(h, -1, -2))
                theta = tangent_projection(state.phi, smooth_field(geom, target.embedding_dim, rng), target)
                ell = smooth_field(geom, 1, rng)[..., 0]
                sigma = float(rng.normal()) if tau_arg is not None else 0.0
                results.append(first_variation_check(geom, state.g, state.phi, potential, alpha, target,
                                                     h, theta, ell, tau_arg, sigma))
            worst = max(r.best_error for r in results)
            passed = all(r.passed for r in results)
            gap = max(r.discretization_gap for r in results)
            checks.append(CheckResult(f"first_variation_{name}", Verdict.PASS if passed else Verdict.FAIL,
                                      residual=worst, details={'discretization_gap': gap,
                                                               'directions': [r.to_dict() for r in results]}))
        checks.append(lambda_upper_bound_check(geom, state.g, state.phi, alpha, target))
        return checks

    def functionals(self, config: RunConfig) -> int:
        writer = self.lab.writer(config)
        writer.resolved_config(config)
        traj = self.lab.run_command.integrate(config)
        report = monotonicity_series(
            traj, tau_horizon=config.functionals.tau_horizon, tolerance=config.functionals.tolerance,
            max_samples=config.functionals.max_samples, threads=self.lab.threads,
            adjoint=config.functionals.adjoint, seed=config.seed, metrics=self.lab.metrics)
        if isinstance(traj, Trajectory):
            for check in self.variation_checks(traj, config):
                report.checks.add(check)
        writer.csv(config.output.csv, series_rows(traj, report))
        writer.json('functional_report.json', report.to_dict())
        if not report.ok:
            logger.error(f"Functional checks failed: {', '.join(report.checks.failed)}")
        return _exit_code(traj, report.checks)

    def d_quantity_checks(self, traj, config: RunConfig) -> MonitorReport:
        """D(S, X) identity and nonnegativity along the run."""
        rng = np.random.default_rng(config.seed)
        if isinstance(traj, HomTrajectory):
            report = MonitorReport()
            if traj.model.normalized:
                return report
            residuals, minima = [], []
            for state in traj.samples:
                for _ in range(D_QUANTITY_FIELDS):
                    dq = hom_d_quantity(state, traj.model, rng.normal(size=traj.model.dim))
                    residuals.append(dq.residual)
                    minima.append(float(dq.value))
            report.add(CheckResult('d_identity', verdict_for(max(residuals), HOMOGENEOUS_TOLERANCE),
                                   residual=max(residuals), tolerance=HOMOGENEOUS_TOLERANCE))
            low = min(minima)
            report.add(CheckResult('d_nonnegative', verdict_for(max(0.0, -low), HOMOGENEOUS_TOLERANCE),
                                   residual=max(0.0, -low), tolerance=HOMOGENEOUS_TOLERANCE,
                                   details={'min_value': low}))
            return report
        state = traj.final
        fields = random_vector_fields(state.geom, D_QUANTITY_FIELDS, config.seed)
        return d_quantity_check(state, fields, traj.schedule(state.t), traj.schedule.derivative(state.t),
                                cache=self.lab.cache)

    def reduced_volume(self, config: RunConfig) -> int:
        writer = self.lab.writer(config)
        writer.resolved_config(config)
        traj = self.lab.run_command.integrate(config)
        rv = config.reduced_volume
        report = reduced_volume_series(traj, rv.taus, rv.t0, rv.base, rv.segments, rv.starts,
                                       rv.endpoint_stride, threads=self.lab.threads, seed=config.seed,
                                       tolerance=rv.tolerance, metrics=self.lab.metrics, cache=self.lab.cache)
        report.checks.extend(self.d_quantity_checks(traj, config))
        writer.csv(config.output.csv, series_rows(traj))
        writer.json('reduced_volume_report.json', report.to_dict())
        if report.approximate:
            logger.warning(f"{report.approximate} reduced distances did not converge and are approximate")
        if not report.ok:
            logger.error(f"Reduced-volume checks failed: {', '.join(report.checks.failed)}")
        return _exit_code(traj, report.checks)
