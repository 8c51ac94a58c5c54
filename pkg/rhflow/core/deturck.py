"""
Strictly parabolic DeTurck form of the coupled flow on a flat torus.

With the flat background δ, the gauged system is

    ∂t g_ij = g^{kl} ∂k∂l g_ij + Q_ij(g, ∂g) + 2α ∂iφ·∂jφ
    ∂t φ    = P_φ(g^{kl} ∂k∂l φ)

where Q is the quadratic first-derivative block of the Ricci-DeTurck flow.
It agrees with -2Rc + 2α∇φ⊗∇φ + L_V g and τφ + ∇_V φ for
V^k = g^{ij}Γ^k_ij; `gauge_identity_residual` measures the difference.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..utils.cache import LRUCache
from ..utils.error_handler import ConfigError, ConstraintViolationError, CoverageError, DegenerateMetricError
from ..utils.metrics import MetricsManager
from ..utils.result import Result
from .grid_tensor import (
    GridGeometry, TargetSpec, analyze_state, check_map_constraint, check_positive_definite,
    christoffel, compute_geometry, covariant_derivative, directional, gradient, map_calculus,
    second_derivatives, symmetrize,
)
from .trajectory import CouplingSchedule, DiagnosticSeries, SingularityReport

logger = logging.getLogger(__name__)

CFL_SAFETY = 0.2
CFL_LIMIT = 0.25
MIN_DT = 1e-10
RM_BLOWUP = 1e6
ENERGY_BLOWUP = 1e6


@dataclass(frozen=True)
class FlowState:
    """(g, φ) at time t in the gauge of a flat background g₀ (δ unless given).

    Any spatially constant g₀ has vanishing Christoffel symbols and gives the
    same gauged system as δ; curved backgrounds are rejected.
    """
    t: float
    g: np.ndarray
    phi: np.ndarray
    geom: GridGeometry
    target: TargetSpec
    background: Optional[np.ndarray] = None
    step: int = 0

    def validate(self) -> None:
        if self.g.shape != self.geom.shape + (self.geom.dim, self.geom.dim):
            raise ValueError(f"metric shape {self.g.shape} does not match grid {self.geom.shape}")
        check_positive_definite(self.g)
        check_map_constraint(self.phi, self.target)
        if self.background is not None:
            self._validate_background()

    def _validate_background(self) -> None:
        b = self.background
        if b.shape != self.g.shape:
            raise ConfigError('background', f"shape {b.shape} does not match the metric {self.g.shape}")
        check_positive_definite(b)
        if not np.allclose(b, b[(0,) * self.geom.dim], rtol=0.0, atol=1e-12):
            raise ConfigError('background', "must be flat (spatially constant); curved backgrounds are not supported")

    def advanced(self, t: float, g: np.ndarray, phi: np.ndarray, steps: int = 1) -> 'FlowState':
        return replace(self, t=t, g=g, phi=phi, step=self.step + steps)


def deturck_vector(geom: GridGeometry, g: np.ndarray, background: Optional[np.ndarray] = None,
                   inverse: Optional[np.ndarray] = None, gamma: Optional[np.ndarray] = None) -> np.ndarray:
    """V^l = g^{ij}(Γ^l_ij(g) - Γ^l_ij(g₀))."""
    if inverse is None or gamma is None:
        bundle = compute_geometry(geom, g)
        inverse, gamma = bundle.inverse, bundle.gamma
    diff = gamma
    if background is not None:
        diff = gamma - christoffel(geom, background)
    return np.einsum('...ij,...lij->...l', inverse, diff)


def _quadratic_block(inv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Q_ij for a flat background; dg[..., a, i, j] = ∂a g_ij."""
    def term(spec: str) -> np.ndarray:
        return np.einsum(spec, inv, inv, dg, dg, optimize=True)

    q = (term('...kl,...pq,...ipk,...jql->...ij')
         + 2 * term('...kl,...pq,...kip,...qjl->...ij')
         - 2 * term('...kl,...pq,...kip,...ljq->...ij')
         - 2 * term('...kl,...pq,...ipk,...ljq->...ij')
         - 2 * term('...kl,...pq,...jpk,...liq->...ij'))
    return 0.5 * q


def flow_rhs(state: FlowState, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """(ġ, φ̇) of the gauged system."""
    geom, g, phi = state.geom, state.g, state.phi
    check_positive_definite(g)
    inv = symmetrize(np.linalg.inv(g))

    d2g = second_derivatives(geom, g)  # [..., k, l, i, j]
    principal = np.einsum('...kl,...klij->...ij', inv, d2g)
    dphi = gradient(geom, phi)  # [..., i, lam]
    outer = np.einsum('...il,...jl->...ij', dphi, dphi)
    g_dot = symmetrize(principal + _quadratic_block(inv, gradient(geom, g)) + 2 * alpha * outer)

    lap = np.einsum('...kl,...klx->...x', inv, second_derivatives(geom, phi))
    phi_dot = state.target.tangent_part(phi, lap)
    return g_dot, phi_dot


def lie_derivative_metric(geom: GridGeometry, g: np.ndarray, v: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """(L_V g)_ij = ∇i V_j + ∇j V_i."""
    v_lower = np.einsum('...jk,...k->...j', g, v)
    nabla = covariant_derivative(geom, gamma, v_lower, 1)
    return nabla + np.swapaxes(nabla, -1, -2)


def gauge_identity_residual(state: FlowState, alpha: float) -> Dict[str, float]:
    """Sup-norms of flow_rhs minus (-2Rc + 2α∇φ⊗∇φ + L_V g, τφ + ∇_V φ)."""
    geom = state.geom
    bundle = compute_geometry(geom, state.g)
    maps = map_calculus(geom, state.g, state.phi, state.target, bundle)
    v = deturck_vector(geom, state.g, inverse=bundle.inverse, gamma=bundle.gamma)
    g_dot, phi_dot = flow_rhs(state, alpha)
    geometric_g = -2 * bundle.ricci + 2 * alpha * maps.outer + lie_derivative_metric(geom, state.g, v, bundle.gamma)
    geometric_phi = maps.tension + directional(maps.grad, v)
    return {
        'metric': float(np.max(np.abs(g_dot - geometric_g))),
        'map': float(np.max(np.abs(phi_dot - geometric_phi))),
    }


def cfl_dt(geom: GridGeometry, g: np.ndarray, safety: float = CFL_SAFETY) -> float:
    """0.2 h² over the largest eigenvalue of g^{-1}."""
    largest = float(np.max(1.0 / np.linalg.eigvalsh(g)[..., 0]))
    return safety * geom.spacing ** 2 / largest


def _stage(state: FlowState, g: np.ndarray, phi: np.ndarray) -> FlowState:
    return replace(state, g=symmetrize(g), phi=state.target.project(phi))


def step(state: FlowState, dt: float, schedule: CouplingSchedule) -> Result[FlowState]:
    """One classical RK4 step; symmetrize and reproject after every stage."""
    t = state.t
    try:
        k1g, k1p = flow_rhs(state, schedule(t))
        s2 = _stage(state, state.g + dt / 2 * k1g, state.phi + dt / 2 * k1p)
        k2g, k2p = flow_rhs(s2, schedule(t + dt / 2))
        s3 = _stage(state, state.g + dt / 2 * k2g, state.phi + dt / 2 * k2p)
        k3g, k3p = flow_rhs(s3, schedule(t + dt / 2))
        s4 = _stage(state, state.g + dt * k3g, state.phi + dt * k3p)
        k4g, k4p = flow_rhs(s4, schedule(t + dt))
        g = symmetrize(state.g + dt / 6 * (k1g + 2 * k2g + 2 * k3g + k4g))
        phi = state.target.project(state.phi + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p))
        check_positive_definite(g)
        if not np.all(np.isfinite(phi)):
            raise ConstraintViolationError("map field is no longer finite")
    except (DegenerateMetricError, ConstraintViolationError, FloatingPointError) as e:
        return Result.err(str(e), hint=dt / 2)
    return Result.ok(state.advanced(t + dt, g, phi))


def state_diagnostics(state: FlowState, schedule: CouplingSchedule,
                      cache: Optional[LRUCache] = None) -> Dict[str, float]:
    geo = analyze_state(state.geom, state.g, state.phi, state.target, cache)
    alpha = schedule(state.t)
    _, s = geo.s_fields(alpha)
    identity = np.eye(state.geom.dim)
    return {
        't': state.t,
        'vol': geo.bundle.volume,
        's_min': float(np.min(s)),
        's_max': float(np.max(s)),
        'r_max': float(np.max(geo.bundle.scalar)),
        'energy_max': float(np.max(geo.maps.energy_density)),
        'rm_max': float(np.max(geo.riemann_norm())),
        'hess_max': float(np.sqrt(np.max(geo.hessian_norm2()))),
        'alpha': alpha,
        'alpha_dot': schedule.derivative(state.t),
        'metric_deviation': float(np.max(np.abs(state.g - identity))),
    }


@dataclass
class Trajectory:
    """Samples of a grid run plus per-step diagnostics."""
    samples: List[FlowState]
    diagnostics: List[Dict[str, float]]
    schedule: CouplingSchedule
    dt: float
    singularity: Optional[SingularityReport] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def geom(self) -> GridGeometry:
        return self.samples[0].geom

    @property
    def target(self) -> TargetSpec:
        return self.samples[0].target

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def final(self) -> FlowState:
        return self.samples[-1]

    def diagnostic_series(self) -> DiagnosticSeries:
        return DiagnosticSeries.from_rows(self.geom.dim, self.diagnostics)

    def bracket(self, t: float) -> Tuple[int, float]:
        """Index i and weight w with t = (1-w)·t_i + w·t_{i+1}."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise CoverageError(f"t = {t} outside the trajectory range [{times[0]}, {times[-1]}]")
        if len(times) == 1:
            return 0, 0.0
        i = int(np.clip(np.searchsorted(times, t, side='right') - 1, 0, len(times) - 2))
        w = (t - times[i]) / (times[i + 1] - times[i])
        return i, float(np.clip(w, 0.0, 1.0))


class _Singular(Exception):
    def __init__(self, reason: str, exceeded: Tuple[str, ...] = ()):
        self.reason = reason
        self.exceeded = exceeded
        super().__init__(reason)


def _advance(state: FlowState, dt: float, schedule: CouplingSchedule,
             metrics: Optional[MetricsManager]) -> FlowState:
    """Take dt, halving recursively on rejection so sample times stay on the grid."""
    result = step(state, dt, schedule)
    if metrics is not None:
        metrics.track_step(result.success)
    if result.success:
        return result.value
    half = result.hint
    if half < MIN_DT:
        raise _Singular(f"step rejected below dt={MIN_DT:g}: {result.error}", ('metric',))
    logger.warning(f"Step at t={state.t:.6g} rejected ({result.error}); retrying with dt={half:.3g}")
    mid = _advance(state, half, schedule, metrics)
    out = _advance(mid, half, schedule, metrics)
    return replace(out, step=state.step + 1)


def _cfl_substeps(state: FlowState, span: float) -> int:
    """1 while span respects the stability limit of the current metric, else equal substeps at CFL_SAFETY."""
    limit = cfl_dt(state.geom, state.g, CFL_LIMIT)
    # a non-positive limit means a degenerate metric, which the step itself rejects
    if not limit > 0 or span <= limit:
        return 1
    return int(math.ceil(span / cfl_dt(state.geom, state.g)))


def run(initial: FlowState, schedule: CouplingSchedule, t_end: float, dt: Optional[float] = None,
        sample_stride: int = 1, rm_threshold: float = RM_BLOWUP, energy_threshold: float = ENERGY_BLOWUP,
        on_sample: Optional[Callable[[FlowState, int], None]] = None,
        metrics: Optional[MetricsManager] = None, cache: Optional[LRUCache] = None) -> Trajectory:
    """Integrate from `initial` (which may be a resumed state) up to t_end."""
    initial.validate()
    if sample_stride < 1:
        raise ValueError("sample_stride must be at least 1")
    if dt is None:
        dt = cfl_dt(initial.geom, initial.g)
    n_steps = int(math.ceil((t_end - initial.t) / dt - 1e-9))
    logger.info(f"Run from t={initial.t:g} to t={t_end:g}: dt={dt:.4g}, {n_steps} steps, "
                f"grid {initial.geom.nodes}^{initial.geom.dim}, target {initial.target.kind}")

    started = time.perf_counter()
    samples = [initial]
    diagnostics = [state_diagnostics(initial, schedule, cache)]
    singularity = None
    state = initial
    t0 = initial.t
    limited = 0
    for k in range(1, n_steps + 1):
        t_next = t_end if k == n_steps else t0 + k * dt
        try:
            pieces = _cfl_substeps(state, t_next - state.t)
            if pieces > 1:
                limited += 1
                logger.debug(f"Step at t={state.t:.6g} exceeds the CFL limit; taking {pieces} substeps")
            start = state
            for j in range(1, pieces + 1):
                t_sub = t_next if j == pieces else start.t + j * (t_next - start.t) / pieces
                state = _advance(state, t_sub - state.t, schedule, metrics)
            state = replace(state, step=start.step + 1)
            row = state_diagnostics(state, schedule, cache)
            exceeded = tuple(name for name, key, limit in (
                ('sup|Rm|', 'rm_max', rm_threshold), ('sup|∇φ|²', 'energy_max', energy_threshold))
                if not row[key] <= limit)
            if exceeded:
                raise _Singular('blow-up', exceeded)
        except _Singular as s:
            last = samples[-1] if samples[-1].t == state.t else state
            singularity = SingularityReport(state.t, s.reason, last, dict(diagnostics[-1]), s.exceeded)
            logger.info(f"Run stopped at t={state.t:.6g}: {s.reason} {list(s.exceeded)}")
            break
        except DegenerateMetricError as e:
            singularity = SingularityReport(state.t, 'degenerate metric', state, dict(diagnostics[-1]), ('metric',))
            logger.info(f"Run stopped at t={state.t:.6g}: {e}")
            break
        diagnostics.append(row)
        logger.debug(f"t={state.t:.6g} S_min={row['s_min']:.6g} sup|∇φ|²={row['energy_max']:.6g} "
                     f"sup|Rm|={row['rm_max']:.6g}")
        if k % sample_stride == 0 or k == n_steps:
            samples.append(state)
            if on_sample is not None:
                on_sample(state, len(samples) - 1)

    elapsed = time.perf_counter() - started
    if metrics is not None:
        metrics.track_phase('run', elapsed)
        if cache is not None:
            metrics.update_cache_stats(cache.get_metrics())
    logger.info(f"Run finished at t={state.t:.6g} after {elapsed:.2f}s")
    if limited:
        logger.info(f"{limited} of {n_steps} steps were split to respect the CFL limit")
    return Trajectory(samples, diagnostics, schedule, dt, singularity,
                      {'sample_stride': sample_stride, 'cfl_safety': CFL_SAFETY, 'cfl_limited_steps': limited})
