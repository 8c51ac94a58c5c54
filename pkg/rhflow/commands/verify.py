"""
The `verify` command: discretization checks on n and refine·n grids.

Each suite reports the observed ratio coarse/fine of a sup-norm residual and
its order log(ratio)/log(refine). Fourth-order stencils should give ratios
near refine⁴; the pass thresholds are refine³ for the gauge, evolution and
curvature suites and refine² for the Bochner identity.
"""

import logging
import math
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple

import numpy as np

from ..core.config import RunConfig
from ..core.deturck import FlowState, cfl_dt, gauge_identity_residual, run as run_grid
from ..core.grid_tensor import GridGeometry, TargetSpec, compute_geometry
from ..core.initial_data import conformal_metric, random_map, random_metric
from ..core.monitors import bochner_residual, evolution_residuals
from ..core.reports import CheckResult, MonitorReport, Verdict
from ..core.trajectory import CouplingSchedule
from ..utils.error_handler import EXIT_MONITOR_FAIL, EXIT_OK

if TYPE_CHECKING:
    from ..lab import RHFlowLab

logger = logging.getLogger(__name__)

ROUNDOFF_FLOOR = 1e-11
EVOLUTION_STEPS = 12
EVOLUTION_SAMPLES = 4
CURVATURE_AMPLITUDE = 0.2


def refinement_check(name: str, coarse: float, fine: float, refine: int, threshold: float,
                     **details) -> CheckResult:
    """PASS when the residual drops by at least `threshold`, or sits at roundoff on both grids."""
    ratio = coarse / fine if fine > 0 else math.inf
    order = math.log(ratio) / math.log(refine) if 0 < ratio < math.inf else None
    at_floor = coarse <= ROUNDOFF_FLOOR and fine <= ROUNDOFF_FLOOR
    verdict = Verdict.PASS if ratio >= threshold or at_floor else Verdict.FAIL
    if verdict == Verdict.FAIL:
        logger.warning(f"{name}: refinement ratio {ratio:.3g} below {threshold:g}")
    return CheckResult(name, verdict, residual=fine, tolerance=threshold, order=order,
                       details={'coarse': coarse, 'fine': fine, 'ratio': ratio, **details})


def _fixture(geom: GridGeometry, target: TargetSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    # one generator for both fields so every grid sees the same continuum fixture
    rng = np.random.default_rng(seed)
    g = random_metric(geom, 0.05, rng)
    phi = random_map(geom, target, 0.3, rng)
    return g, phi


class VerifyCommand:
    """Refinement suites selected by `verify.suite`."""

    def __init__(self, lab: 'RHFlowLab'):
        self.lab = lab
        self.suites: Dict[str, Callable[[RunConfig], List[CheckResult]]] = {
            'gauge': self.gauge,
            'evolution': self.evolution,
            'bochner': self.bochner,
            'curvature': self.curvature,
        }

    def _grids(self, config: RunConfig, dim: Optional[int] = None) -> Tuple[GridGeometry, GridGeometry]:
        # fixtures use integer wavenumbers, so the torus keeps side 2π
        coarse = GridGeometry(dim or config.grid.dim, config.verify.nodes, 2 * math.pi)
        return coarse, coarse.refine(config.verify.refine)

    def gauge(self, config: RunConfig) -> List[CheckResult]:
        target = config.target.spec()
        checks = []
        for i in range(config.verify.fixtures):
            seed = config.seed + i
            sups = []
            for geom in self._grids(config):
                g, phi = _fixture(geom, target, seed)
                residual = gauge_identity_residual(FlowState(0.0, g, phi, geom, target), config.verify.alpha)
                sups.append(max(residual.values()))
            refine = config.verify.refine
            checks.append(refinement_check(f"gauge_identity_fixture_{i}", sups[0], sups[1], refine,
                                           refine ** 3, seed=seed))
        return checks

    def evolution(self, config: RunConfig) -> List[CheckResult]:
        target = config.target.spec()
        schedule = CouplingSchedule.constant(config.verify.alpha)
        coarse_geom, _ = self._grids(config)
        g0, _ = _fixture(coarse_geom, target, config.seed)
        t_end = EVOLUTION_STEPS * cfl_dt(coarse_geom, g0)
        per_grid: List[Dict[str, float]] = []
        for geom in self._grids(config):
            g, phi = _fixture(geom, target, config.seed)
            dt = cfl_dt(geom, g)
            steps = max(EVOLUTION_STEPS, int(math.ceil(t_end / dt)))
            traj = run_grid(FlowState(0.0, g, phi, geom, target), schedule, t_end, t_end / steps,
                            sample_stride=steps // EVOLUTION_SAMPLES, metrics=self.lab.metrics,
                            cache=self.lab.cache)
            report = evolution_residuals(traj, schedule, tolerance=math.inf, derivative='flow',
                                         cache=self.lab.cache)
            per_grid.append({c.name: c.residual for c in report.checks})
        refine = config.verify.refine
        return [refinement_check(f"{name}_refinement", per_grid[0][name], per_grid[1][name], refine, refine ** 3,
                                 t_end=t_end)
                for name in per_grid[0]]

    def bochner(self, config: RunConfig) -> List[CheckResult]:
        target = config.target.spec()
        checks = []
        for i in range(config.verify.fixtures):
            seed = config.seed + i
            sups = []
            for geom in self._grids(config):
                g, phi = _fixture(geom, target, seed)
                sups.append(bochner_residual(geom, g, phi, target, tolerance=math.inf)['bochner'].residual)
            refine = config.verify.refine
            checks.append(refinement_check(f"bochner_fixture_{i}", sups[0], sups[1], refine, refine ** 2,
                                           seed=seed))
        return checks

    def curvature(self, config: RunConfig) -> List[CheckResult]:
        """Scalar curvature of e^{2u}δ with u = a·cos x·cos y against R = 4u·e^{-2u}."""
        sups = []
        for geom in self._grids(config, dim=2):
            x, y = geom.coordinates()
            u = CURVATURE_AMPLITUDE * np.cos(x) * np.cos(y)
            bundle = compute_geometry(geom, conformal_metric(geom, u))
            sups.append(float(np.max(np.abs(bundle.scalar - 4 * u * np.exp(-2 * u)))))
        refine = config.verify.refine
        return [refinement_check('scalar_curvature_conformal', sups[0], sups[1], refine, refine ** 3)]

    def __call__(self, config: RunConfig) -> int:
        writer = self.lab.writer(config)
        writer.resolved_config(config)
        suite = config.verify.suite
        names = list(self.suites) if suite == 'all' else [suite]
        report = MonitorReport()
        for name in names:
            logger.info(f"Verify suite '{name}' on {config.verify.nodes} and "
                        f"{config.verify.nodes * config.verify.refine} nodes per axis")
            for check in self.suites[name](config):
                report.add(check)
        writer.json('verify_report.json', report.to_dict())
        logger.info(f"Verify: {len(report.checks)} checks, failed={report.failed}")
        return EXIT_OK if report.ok else EXIT_MONITOR_FAIL
