"""
Residuals and bounds evaluated along states and trajectories.

Grid trajectories are integrated in DeTurck gauge, so every scalar quantity q
satisfies ∂t q = (geometric right-hand side) + V·∇q there; the scalar
evolution residuals add that advection term. Tensor lines are only checked on
homogeneous trajectories, where V vanishes.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..utils.error_handler import InsufficientSamplesError
from .deturck import FlowState, Trajectory, deturck_vector, flow_rhs
from .grid_tensor import (
    GridGeometry, TargetSpec, analyze_state, covariant_derivative, curvature_variation, directional,
    energy_density_variation, gradient, scalar_calculus, tensor_inner,
)
from .homogeneous import (
    HomTrajectory, HomogeneousState, ModelKind, compare_trajectories, hom_geometry, hom_point_tensors, hom_rates,
    homothety_sigma, integrate_model, lichnerowicz_at_point, renormalize, target_curvature_tensor_at_point,
)
from .reports import CheckResult, MonitorReport, Verdict, verdict_for
from .trajectory import CouplingSchedule, DiagnosticSeries, time_derivative

logger = logging.getLogger(__name__)

HOMOGENEOUS_TOLERANCE = 1e-8
GROWTH_FLOOR = 1e-12
SINGULAR_MARGIN = 0.01

AnyTrajectory = Union[Trajectory, HomTrajectory]


def _check(name: str, residual: float, tolerance: float, **details) -> CheckResult:
    verdict = verdict_for(residual, tolerance)
    if verdict == Verdict.WARN:
        logger.warning(f"{name}: residual {residual:.3e} above tolerance {tolerance:.3e}")
    return CheckResult(name, verdict, float(residual), float(tolerance),
                       margin=float(tolerance - residual), details=details)


def _bound_check(name: str, margins: Sequence[float], times: Sequence[float], tolerance: float,
                 **details) -> CheckResult:
    """margins are bound - observed; a violation is a negative margin."""
    margins = np.asarray(margins, dtype=float)
    worst = float(np.min(margins)) if len(margins) else math.inf
    check = _check(name, max(0.0, -worst), tolerance, times=list(times), margins=margins, **details)
    check.margin = worst
    return check


# -- evolution equations -----------------------------------------------------------

class ScalarRates(NamedTuple):
    """Right-hand sides of the scalar evolution equations at one state."""
    s: np.ndarray
    energy: np.ndarray
    scalar: np.ndarray


def scalar_evolution_rhs(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                         alpha: float, alpha_dot: float = 0.0, cache=None) -> Dict[str, np.ndarray]:
    """Fields q and the geometric rates of S, |∇φ|² and R at one grid state."""
    geo = analyze_state(geom, g, phi, target, cache)
    b, mc = geo.bundle, geo.maps
    inv = b.inverse
    s_ij, s = geo.s_fields(alpha)
    energy = mc.energy_density
    tension2 = np.sum(mc.tension ** 2, axis=-1)
    hess2 = geo.hessian_norm2()
    outer2 = tensor_inner(inv, mc.outer)
    ricci_outer = tensor_inner(inv, b.ricci, mc.outer)

    def lap(q: np.ndarray) -> np.ndarray:
        return scalar_calculus(geom, g, q, b).laplacian

    rates = ScalarRates(
        s=lap(s) + 2 * tensor_inner(inv, s_ij) + 2 * alpha * tension2 - alpha_dot * energy,
        energy=lap(energy) - 2 * alpha * outer2 - 2 * hess2 + 2 * geo.target_term,
        scalar=(lap(b.scalar) + 2 * tensor_inner(inv, b.ricci) - 4 * alpha * ricci_outer
                + 2 * alpha * tension2 - 2 * alpha * hess2 + 2 * alpha * geo.target_term),
    )
    v = deturck_vector(geom, g, inverse=inv, gamma=b.gamma)
    fields = {'s': s, 'energy': energy, 'scalar': b.scalar}
    return {
        'fields': fields,
        'rates': rates._asdict(),
        'advection': {k: np.einsum('...k,...k->...', v, gradient(geom, q)) for k, q in fields.items()},
    }


def flow_time_derivatives(state: FlowState, alpha: float, alpha_dot: float = 0.0,
                          cache=None) -> Dict[str, np.ndarray]:
    """∂t of the discrete S, |∇φ|² and R along the gauged flow, exact in time."""
    geo = analyze_state(state.geom, state.g, state.phi, state.target, cache)
    g_dot, phi_dot = flow_rhs(state, alpha)
    _, d_scalar = curvature_variation(state.geom, geo.bundle, g_dot)
    d_energy = energy_density_variation(state.geom, geo.bundle, geo.maps, g_dot, phi_dot)
    return {
        's': d_scalar - alpha * d_energy - alpha_dot * geo.maps.energy_density,
        'energy': d_energy,
        'scalar': d_scalar,
    }


def _grid_evolution(traj: Trajectory, schedule: CouplingSchedule, tolerance: Optional[float],
                    gauge_correction: bool, time_order: int, derivative: str, cache) -> MonitorReport:
    samples = traj.samples
    times = traj.times
    if derivative == 'flow':
        indices = list(range(len(samples)))
        exact = [flow_time_derivatives(s, schedule(s.t), schedule.derivative(s.t), cache) for s in samples]
    elif derivative == 'samples':
        if len(samples) < 3:
            raise InsufficientSamplesError("evolution residuals from samples need at least three samples")
        indices = list(range(1, len(samples) - 1))
    else:
        raise ValueError(f"unknown time derivative '{derivative}'")
    per_sample = [scalar_evolution_rhs(s.geom, s.g, s.phi, s.target, schedule(s.t),
                                       schedule.derivative(s.t), cache) for s in samples]
    report = MonitorReport()
    h = traj.geom.spacing
    dt_sample = float(np.max(np.diff(times))) if len(times) > 1 else 0.0
    labels = {'s': 'S', 'energy': 'energy_density', 'scalar': 'scalar_curvature'}
    for key, label in labels.items():
        if derivative == 'flow':
            lhs = [d[key] for d in exact]
        else:
            lhs = time_derivative(np.stack([p['fields'][key] for p in per_sample]), times, order=time_order)
        sups = []
        scale = 1.0
        for i in indices:
            rhs = per_sample[i]['rates'][key]
            if gauge_correction:
                rhs = rhs + per_sample[i]['advection'][key]
            sups.append(float(np.max(np.abs(lhs[i] - rhs))))
            scale = max(scale, float(np.max(np.abs(lhs[i]))))
        if tolerance is not None:
            tol = tolerance
        elif derivative == 'flow':
            tol = 10 * h ** 2 * scale
        else:
            tol = 10 * (h ** 2 + dt_sample ** 2) * scale
        report.add(_check(f"evolution_{label}", max(sups), tol, times=[float(times[i]) for i in indices],
                          sup_residuals=sups, gauge_corrected=gauge_correction, derivative=derivative,
                          spacing=h, sample_dt=dt_sample))
    return report


def _hom_evolution(traj: HomTrajectory, tolerance: float) -> MonitorReport:
    model = traj.model
    report = MonitorReport()
    worst: Dict[str, List[float]] = {k: [] for k in ('S', 'energy_density', 'scalar_curvature',
                                                      'S_tensor', 'outer_tensor')}
    for state in traj.samples:
        geo = hom_geometry(state, model)
        rates = hom_rates(state, model)
        a = geo.alpha
        a_dot = 0.0 if model.flow == 'ricci' else state.alpha_dot
        # volume normalization adds 2ρg to ġ, which scales every curvature scalar by -2ρ
        rho = geo.s / model.dim if model.normalized else 0.0
        s_rhs = 2 * geo.s_norm2 - a_dot * geo.energy - 2 * rho * geo.s
        e_rhs = -2 * a * geo.outer_norm2 + 2 * geo.target_term - 2 * rho * geo.energy
        r_rhs = (2 * geo.ricci_norm2 - 4 * a * geo.ricci_outer + 2 * a * geo.target_term
                 - 2 * rho * geo.scalar)
        worst['S'].append(abs(rates.s_dot - s_rhs))
        worst['energy_density'].append(abs(rates.energy_dot - e_rhs))
        worst['scalar_curvature'].append(abs(rates.scalar_dot - r_rhs))

        # coordinate components of S_ij and ∇φ⊗∇φ do not depend on the scales
        pt = hom_point_tensors(state, model)
        s_lhs = np.diag(np.repeat(rates.s_coefficient_dots, 2))
        s_tensor_rhs = lichnerowicz_at_point(state, model, pt.s_tensor) - a_dot * pt.outer
        outer_rhs = (-np.einsum('ip,pq,qj->ij', pt.ricci, pt.inverse, pt.outer)
                     - np.einsum('jp,pq,qi->ij', pt.ricci, pt.inverse, pt.outer)
                     + 2 * target_curvature_tensor_at_point(state, model))
        worst['S_tensor'].append(float(np.max(np.abs(s_lhs - s_tensor_rhs))))
        worst['outer_tensor'].append(float(np.max(np.abs(outer_rhs))))

    times = list(traj.times)
    for label, values in worst.items():
        report.add(_check(f"evolution_{label}", max(values), tolerance, times=times, residuals=values))
    return report


def evolution_residuals(traj: AnyTrajectory, schedule: Optional[CouplingSchedule] = None,
                        tolerance: Optional[float] = None, gauge_correction: bool = True,
                        time_order: int = 2, derivative: str = 'flow', cache=None) -> MonitorReport:
    """Residuals of the evolution equations of S, |∇φ|² and R along a trajectory.

    Homogeneous trajectories compare the exact chain-rule rates against the
    right-hand sides and also check the S_ij and ∇φ⊗∇φ tensor lines. On grid
    trajectories `derivative` picks the left-hand side: 'flow' linearizes the
    discrete fields along the gauged right-hand side at every sample, leaving
    only the spatial error; 'samples' takes central time differences of the
    stored fields at interior samples.
    """
    if isinstance(traj, HomTrajectory):
        return _hom_evolution(traj, HOMOGENEOUS_TOLERANCE if tolerance is None else tolerance)
    schedule = schedule if schedule is not None else traj.schedule
    return _grid_evolution(traj, schedule, tolerance, gauge_correction, time_order, derivative, cache)


# -- maximum-principle bounds --------------------------------------------------------

def bounds_from_series(series: DiagnosticSeries, target_curvature: float, non_increasing: bool = True,
                       t_sing: Optional[float] = None, tolerance: float = HOMOGENEOUS_TOLERANCE) -> MonitorReport:
    """Maximum-principle bounds on S_min and sup|∇φ|² from sampled sup/inf series.

    Bounds that need a non-increasing coupling are skipped when it is not;
    the ones that need a positive lower bound on α are skipped when α̲ = 0.
    """
    m = series.dim
    t = series.t
    positive = t > 0
    s0 = float(series.s_min[0])
    e0 = float(series.energy_max[0])
    alpha_low = float(np.min(series.alpha))
    c0 = target_curvature
    report = MonitorReport()

    def tol_for(bound: np.ndarray) -> float:
        scale = np.max(np.abs(bound[np.isfinite(bound)])) if np.any(np.isfinite(bound)) else 1.0
        return tolerance * max(1.0, float(scale))

    if non_increasing:
        denom = 1 - (2 * t / m) * s0
        valid = denom > 0
        bound = np.where(valid, s0 / np.where(valid, denom, 1.0), np.inf)
        report.add(_bound_check('s_min_comparison', series.s_min[valid] - bound[valid], t[valid],
                                tol_for(bound[valid]), s_min_initial=s0))
        report.add(_bound_check('s_min_non_decreasing', series.s_min - s0, t, tolerance * max(1.0, abs(s0))))
        lower = -m / (2 * t[positive])
        report.add(_bound_check('s_lower_bound', series.s_min[positive] - lower, t[positive], tol_for(lower)))
        if s0 > 0:
            limit = m / (2 * s0)
            reached = t_sing if t_sing is not None else float(t[-1])
            # a run that outlives the bound without a singularity violates it as well
            excess = reached - limit if (t_sing is not None or t[-1] > limit) else 0.0
            report.add(_check('singularity_time_bound', max(0.0, excess), tolerance * max(1.0, limit),
                              bound=limit, t_sing=t_sing))

    if non_increasing and alpha_low > 0:
        r0 = float(np.max(series.r_max))
        bound = r0 / alpha_low + m / (2 * alpha_low * t[positive])
        report.add(_bound_check('energy_curvature_bound', bound - series.energy_max[positive], t[positive],
                                tol_for(bound), r_max=r0, alpha_min=alpha_low))

    if non_increasing:
        if c0 <= 0 or c0 <= alpha_low / m:
            report.add(_bound_check('energy_initial_bound', e0 - series.energy_max, t,
                                    tolerance * max(1.0, e0), case='non-positive target curvature'
                                    if c0 <= 0 else 'c0 <= alpha/m'))
        if c0 <= 0 and alpha_low > 0:
            bound = m / (2 * alpha_low * t[positive])
            report.add(_bound_check('energy_decay_bound', bound - series.energy_max[positive], t[positive],
                                    tol_for(bound), alpha_min=alpha_low))
        if c0 > 0 and e0 > 0:
            t_star = 1.0 / (4 * c0 * e0)
            window = t < t_star
            report.add(_bound_check('energy_doubling_bound', 2 * e0 - series.energy_max[window], t[window],
                                    tolerance * max(1.0, e0), t_star=t_star))
            t_blow = 1.0 / (2 * c0 * e0)
            window = t < t_blow
            bound = e0 / (1 - 2 * c0 * e0 * t[window])
            report.add(_bound_check('energy_comparison_bound', bound - series.energy_max[window], t[window],
                                    tol_for(bound), t_limit=t_blow))
    return report


def max_principle_bounds(traj: AnyTrajectory, schedule: Optional[CouplingSchedule] = None,
                         tolerance: Optional[float] = None) -> MonitorReport:
    """Evaluate the maximum-principle bounds along a trajectory.

    Homogeneous models use target curvature bound 1 (the unit sphere factor);
    grid runs take it from the target. The default tolerance is 10× the
    discretization estimate of the run.
    """
    series = traj.diagnostic_series()
    if len(series) < 2:
        raise InsufficientSamplesError("bounds need at least two samples")
    if isinstance(traj, HomTrajectory):
        if traj.model.normalized:
            raise ValueError("maximum-principle bounds apply to the unnormalized flow")
        c0 = 1.0
        non_increasing = traj.schedule is None or traj.schedule.is_non_increasing
        tol = tolerance if tolerance is not None else max(HOMOGENEOUS_TOLERANCE, 10 * traj.dt ** 4)
    else:
        schedule = schedule if schedule is not None else traj.schedule
        c0 = traj.target.curvature_bound
        non_increasing = schedule.is_non_increasing
        tol = tolerance if tolerance is not None else 10 * (traj.geom.spacing ** 2 + traj.dt ** 2)
    t_sing = traj.singularity.t if traj.singularity is not None else None
    if not non_increasing:
        logger.info("Coupling is not non-increasing; only bounds without that assumption are evaluated")
    report = bounds_from_series(series, c0, non_increasing, t_sing, tol)
    logger.info(f"Maximum-principle bounds: {len(report.checks)} checks, failed={report.failed}")
    return report


# -- Bochner identity ------------------------------------------------------------------

def bochner_terms(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                  cache=None) -> Dict[str, np.ndarray]:
    """Left side Δ|∇φ|² and the four right-hand terms as fields."""
    geo = analyze_state(geom, g, phi, target, cache)
    b, mc = geo.bundle, geo.maps
    grad_tension = gradient(geom, mc.tension)  # [..., i, lam]
    return {
        'laplacian_energy': scalar_calculus(geom, g, mc.energy_density, b).laplacian,
        'tension_term': 2 * np.einsum('...ij,...li,...jl->...', b.inverse, mc.grad, grad_tension),
        'hessian_term': 2 * geo.hessian_norm2(),
        'ricci_term': 2 * tensor_inner(b.inverse, b.ricci, mc.outer),
        'target_term': -2 * geo.target_term,
    }


def bochner_residual(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                     tolerance: Optional[float] = None, cache=None) -> MonitorReport:
    terms = bochner_terms(geom, g, phi, target, cache)
    rhs = terms['tension_term'] + terms['hessian_term'] + terms['ricci_term'] + terms['target_term']
    residual = float(np.max(np.abs(terms['laplacian_energy'] - rhs)))
    tol = tolerance if tolerance is not None else 10 * geom.spacing ** 2
    sups = {k: float(np.max(np.abs(v))) for k, v in terms.items()}
    return MonitorReport([_check('bochner', residual, tol, terms=sups, spacing=geom.spacing)])


# -- solitons ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolitonData:
    """Potential f and soliton constant σ; σ < 0 shrinking, 0 steady, > 0 expanding."""
    f: np.ndarray
    sigma: float

    @property
    def kind(self) -> str:
        if self.sigma < 0:
            return 'shrinking'
        return 'steady' if self.sigma == 0 else 'expanding'


def soliton_residual(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, data: SolitonData, alpha: float,
                     target: TargetSpec, tolerance: Optional[float] = None, cache=None) -> MonitorReport:
    """Residuals of the coupled elliptic system, its trace and its first integral."""
    geo = analyze_state(geom, g, phi, target, cache)
    b, mc = geo.bundle, geo.maps
    calc = scalar_calculus(geom, g, data.f, b)
    s_ij, s = geo.s_fields(alpha)
    metric_eq = s_ij + calc.hessian + data.sigma * g
    grad_f = np.einsum('...ij,...j->...i', b.inverse, calc.grad)
    map_eq = mc.tension - directional(mc.grad, grad_f)
    trace_eq = s + calc.laplacian + data.sigma * geom.dim
    first_integral = s + np.einsum('...i,...i->...', grad_f, calc.grad) + 2 * data.sigma * data.f
    tol = tolerance if tolerance is not None else 10 * geom.spacing ** 2

    report = MonitorReport()
    report.add(_check('soliton_metric', float(np.max(np.sqrt(tensor_inner(b.inverse, metric_eq)))), tol,
                      sigma=data.sigma, kind=data.kind))
    report.add(_check('soliton_map', float(np.max(np.linalg.norm(map_eq, axis=-1))), tol))
    report.add(_check('soliton_trace', float(np.max(np.abs(trace_eq))), tol))
    report.add(_check('soliton_first_integral', float(np.std(first_integral)), tol,
                      mean=float(np.mean(first_integral))))
    return report


def hom_soliton_residual(state: HomogeneousState, model: ModelKind, sigma: Optional[float] = None,
                         tolerance: float = HOMOGENEOUS_TOLERANCE) -> MonitorReport:
    """Soliton residuals for f = 0; σ defaults to ċ/2c of the state."""
    sigma = homothety_sigma(state, model) if sigma is None else sigma
    pt = hom_point_tensors(state, model)
    metric_eq = pt.s_tensor + sigma * pt.metric
    trace = float(np.einsum('ij,ij->', pt.inverse, pt.s_tensor)) + sigma * model.dim
    report = MonitorReport()
    report.add(_check('soliton_metric', float(np.sqrt(tensor_inner(pt.inverse, metric_eq))), tolerance,
                      sigma=sigma))
    # identity maps between homothetic factors are harmonic and f is constant
    report.add(_check('soliton_map', 0.0, tolerance))
    report.add(_check('soliton_trace', abs(trace), tolerance))
    report.add(_check('soliton_first_integral', 0.0, tolerance))
    return report


# -- D-quantity ----------------------------------------------------------------------------

class DQuantity(NamedTuple):
    value: np.ndarray     # 2α|τφ - ∇_Xφ|² - α̇|∇φ|²
    direct: np.ndarray    # assembled from ∂tS, ΔS, |S_ij|², div S, ∇S, Rc(X,X), S(X,X)
    residual: float


def d_quantity(state: FlowState, x: np.ndarray, alpha: float, alpha_dot: float = 0.0,
               s_dot: Optional[np.ndarray] = None, cache=None) -> DQuantity:
    """D(S, X) assembled term by term next to its closed form for the coupled flow.

    Without `s_dot`, ∂tS is taken from its evolution equation, so the check
    exercises the divergence identity 4 div S(X) - 2 dS(X) = -4α<τφ, ∇_Xφ>.
    """
    if alpha < 0:
        raise ValueError(f"coupling must be non-negative, got {alpha}")
    geom = state.geom
    geo = analyze_state(geom, state.g, state.phi, state.target, cache)
    b, mc = geo.bundle, geo.maps
    inv = b.inverse
    s_ij, s = geo.s_fields(alpha)
    calc = scalar_calculus(geom, state.g, s, b)
    s_norm2 = tensor_inner(inv, s_ij)
    tension2 = np.sum(mc.tension ** 2, axis=-1)
    if s_dot is None:
        s_dot = calc.laplacian + 2 * s_norm2 + 2 * alpha * tension2 - alpha_dot * mc.energy_density

    nabla_s = covariant_derivative(geom, b.gamma, s_ij, 2)  # [..., a, i, j] = ∇_a S_ij
    div_s = np.einsum('...ai,...aij->...j', inv, nabla_s)
    direct = (s_dot - calc.laplacian - 2 * s_norm2
              + 4 * np.einsum('...j,...j->...', div_s, x)
              - 2 * np.einsum('...j,...j->...', calc.grad, x)
              + 2 * np.einsum('...ij,...i,...j->...', b.ricci, x, x)
              - 2 * np.einsum('...ij,...i,...j->...', s_ij, x, x))
    deviation = mc.tension - directional(mc.grad, x)
    value = 2 * alpha * np.sum(deviation ** 2, axis=-1) - alpha_dot * mc.energy_density
    return DQuantity(value, direct, float(np.max(np.abs(direct - value))))


def hom_d_quantity(state: HomogeneousState, model: ModelKind, x: np.ndarray) -> DQuantity:
    """D(S, X) at a point of a homogeneous model, with ∂tS from the exact rates."""
    if model.normalized:
        raise ValueError("the D-quantity is defined for the unnormalized flow")
    geo = hom_geometry(state, model)
    rates = hom_rates(state, model)
    pt = hom_point_tensors(state, model)
    a = geo.alpha
    a_dot = 0.0 if model.flow == 'ricci' else state.alpha_dot
    x = np.asarray(x, dtype=float)
    direct = (rates.s_dot - 2 * geo.s_norm2
              + 2 * x @ pt.ricci @ x - 2 * x @ pt.s_tensor @ x)
    # τφ = 0 and ∇_Xφ = X in unit-factor coordinates
    value = 2 * a * float(x @ x) - a_dot * geo.energy
    return DQuantity(np.array(value), np.array(direct), abs(float(direct) - value))


def d_quantity_check(state: FlowState, fields: Sequence[np.ndarray], alpha: float, alpha_dot: float = 0.0,
                     tolerance: Optional[float] = None, cache=None) -> MonitorReport:
    """Identity residual and nonnegativity of D over a family of vector fields."""
    tol = tolerance if tolerance is not None else 10 * state.geom.spacing ** 2
    residuals, minima = [], []
    for x in fields:
        dq = d_quantity(state, x, alpha, alpha_dot, cache=cache)
        residuals.append(dq.residual)
        minima.append(float(np.min(dq.value)))
    report = MonitorReport()
    report.add(_check('d_identity', max(residuals), tol, fields=len(residuals)))
    report.add(_check('d_nonnegative', max(0.0, -min(minima)), HOMOGENEOUS_TOLERANCE,
                      min_value=min(minima), alpha_dot=alpha_dot))
    return report


def random_vector_fields(geom: GridGeometry, count: int, seed: int = 0, modes: int = 2) -> List[np.ndarray]:
    """Smooth random vector fields built from low Fourier modes."""
    rng = np.random.default_rng(seed)
    coords = geom.coordinates()
    out = []
    for _ in range(count):
        x = np.zeros(geom.shape + (geom.dim,))
        for a in range(geom.dim):
            for _ in range(3):
                k = rng.integers(-modes, modes + 1, size=geom.dim)
                phase = rng.uniform(0, 2 * np.pi)
                x[..., a] += rng.normal() * np.cos(sum(kk * c for kk, c in zip(k, coords)) + phase)
        out.append(x)
    return out


# -- gradient estimates -------------------------------------------------------------------

def bounded_growth_check(name: str, t: np.ndarray, values: np.ndarray, power: int,
                         finite_only: bool = False) -> CheckResult:
    """Boundedness of t^p·X on a run without an explicit constant.

    The tail peak (second half of the time range) is compared with the
    maximum over the first half; a constant X gives the ratio 2^p, so the
    tolerance is twice that. `finite_only` keeps just the finiteness test.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    tolerance = 2.0 * 2 ** power
    finite = bool(np.all(np.isfinite(values)))
    mid = t[0] + 0.5 * (t[-1] - t[0])
    early, tail = values[t <= mid], values[t >= mid]
    slope = 0.0
    ratio = math.inf
    if finite:
        early_max = float(np.max(early))
        tail_max = float(np.max(tail))
        ratio = 0.0 if tail_max <= GROWTH_FLOOR else tail_max / max(early_max, GROWTH_FLOOR)
        if len(tail) >= 2:
            slope = float(np.polyfit(t[t >= mid], tail, 1)[0])
    if finite_only:
        verdict = Verdict.PASS if finite else Verdict.FAIL
    else:
        verdict = verdict_for(ratio, tolerance)
    if verdict != Verdict.PASS:
        logger.warning(f"{name}: tail grew to {ratio:.3g}× the early maximum")
    return CheckResult(name, verdict, residual=float(ratio), tolerance=tolerance,
                       details={'times': t, 'values': values, 'tail_slope': slope, 'finite_only': finite_only})


def gradient_estimate_series(traj: AnyTrajectory) -> MonitorReport:
    """t·sup|∇φ|², t·sup|Rm| and t²(sup|Rm|² + sup|∇²φ|²) along a run.

    Runs that end in a singularity are cut at t_sing - SINGULAR_MARGIN and
    only need finite series there; otherwise each series must stay bounded
    in the sense of `bounded_growth_check`.
    """
    series = traj.diagnostic_series()
    t = series.t
    named = {
        'energy': (t * series.energy_max, 1),
        'curvature': (t * series.rm_max, 1),
        'second_order': (t ** 2 * (series.rm_max ** 2 + series.hess_max ** 2), 2),
    }
    singular = traj.singularity is not None
    keep = t <= traj.singularity.t - SINGULAR_MARGIN if singular else np.ones(len(t), dtype=bool)
    if np.count_nonzero(keep) < 2:
        keep = np.ones(len(t), dtype=bool)
    report = MonitorReport()
    for name, (values, power) in named.items():
        report.add(bounded_growth_check(f"gradient_estimate_{name}", t[keep], values[keep], power,
                                        finite_only=singular))
    return report


# -- volume normalization ----------------------------------------------------------

def renormalization_check(traj: HomTrajectory, tolerance: float = 1e-6) -> Optional[CheckResult]:
    """Compare a normalized run with the rescaled unnormalized run from the same start.

    The unnormalized run covers the same t range, so the comparison covers
    [0, t̄(t_end)] of the normalized clock. None unless the run is normalized,
    starts at t = 0 with unit volume and has a constant coupling.
    """
    model = traj.model
    first = traj.samples[0]
    schedule = traj.schedule
    if not model.normalized or schedule is None or len(traj.samples) < 2 or first.t != 0.0 or not traj.dt > 0:
        return None
    if any(schedule.derivative(t) != 0.0 for t in traj.times):
        return None
    if abs(model.base_volume * math.prod(first.scales(model)) - 1.0) > 1e-12:
        return None

    source = integrate_model(replace(model, normalized=False), schedule, float(traj.times[-1]), traj.dt,
                             first.c, first.d)
    rescaled = renormalize(source)
    # the rescaled run keeps every step, so it is the one interpolated
    residual = compare_trajectories(traj, rescaled)
    covered = float(min(rescaled.times[-1], traj.times[-1]))
    logger.info(f"Renormalized comparison over [0, {covered:.4f}]: {residual:.3e}")
    return _check('renormalization_consistency', residual, tolerance, covered=covered)


def monitor_suite(traj: AnyTrajectory, schedule: Optional[CouplingSchedule] = None,
                  tolerance: Optional[float] = None, cache=None) -> MonitorReport:
    """Evolution residuals, maximum-principle bounds and gradient-estimate series of one run.

    `tolerance` replaces the per-check discretization defaults when given.
    """
    report = MonitorReport()
    report.extend(evolution_residuals(traj, schedule, tolerance, cache=cache))
    if not (isinstance(traj, HomTrajectory) and traj.model.normalized):
        report.extend(max_principle_bounds(traj, schedule, tolerance))
    report.extend(gradient_estimate_series(traj))
    if isinstance(traj, HomTrajectory):
        renormalized = renormalization_check(traj)
        if renormalized is not None:
            report.add(renormalized)
    logger.info(f"Monitor suite: {len(report.checks)} checks, {len(report.failed)} failed")
    return report
