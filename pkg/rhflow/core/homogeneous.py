"""
Homogeneous reductions of the coupled flow.

Two models are covered: the round two-sphere with the identity map, and the
product S² × L of a round sphere with a compact hyperbolic surface, again with
the identity map into a copy of itself. Metrics stay in the family
c(t) g_S² ⊕ d(t) g_L, so the flow reduces to ODEs for the scale factors.

Every factor k has a scale x_k and a unit-scale curvature sign κ_k (+1 for the
sphere, -1 for the hyperbolic surface). With the identity map into the unit
factors, per factor

    Rc = κ_k g_unit,   ∇φ⊗∇φ = g_unit,   S_ij = (κ_k - α) g_unit,

which gives ẋ_k = -2(κ_k - α) for the unnormalized flow. The normalized flow
adds (2/m)⨍S·x_k, which keeps the volume fixed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from ..utils.error_handler import CoverageError, InsufficientSamplesError, NoClosedFormError
from .grid_tensor import lichnerowicz_terms, riemann_norm2, tensor_inner
from .trajectory import CouplingSchedule, DiagnosticSeries, SingularityReport

logger = logging.getLogger(__name__)

EXTINCTION_EPS = 1e-6
ROOT_TOLERANCE = 1e-10
FIXED_POINT_TOLERANCE = 1e-10
BLOWUP_SCALE = 1e12
BREATHER_TOLERANCE = 1e-8


class ModelFamily(str, Enum):
    SPHERE2 = 'sphere2'
    PRODUCT = 'product'


_CURVATURE_SIGNS = {
    ModelFamily.SPHERE2: (1.0,),
    ModelFamily.PRODUCT: (1.0, -1.0),
}


@dataclass(frozen=True)
class ModelKind:
    """Which homogeneous model, normalized or not, coupled flow or the Ricci comparator."""
    family: ModelFamily
    normalized: bool = False
    flow: str = 'rh'
    base_volume: float = 1.0

    def __post_init__(self):
        if self.flow not in ('rh', 'ricci'):
            raise ValueError(f"unknown flow '{self.flow}', expected 'rh' or 'ricci'")
        if not self.base_volume > 0:
            raise ValueError("base_volume must be positive")

    @property
    def signs(self) -> Tuple[float, ...]:
        return _CURVATURE_SIGNS[self.family]

    @property
    def factors(self) -> int:
        return len(self.signs)

    @property
    def dim(self) -> int:
        return 2 * self.factors

    def coupling(self, alpha: float) -> float:
        """The Ricci comparator ignores the map."""
        return 0.0 if self.flow == 'ricci' else alpha


@dataclass(frozen=True)
class HomogeneousState:
    t: float
    c: float
    d: float = 1.0
    alpha: float = 0.0
    alpha_dot: float = 0.0

    def scales(self, model: ModelKind) -> Tuple[float, ...]:
        return (self.c, self.d)[:model.factors]

    def is_valid(self, model: ModelKind) -> bool:
        return all(x > 0 and math.isfinite(x) for x in self.scales(model)) and self.alpha >= 0


@dataclass(frozen=True)
class HomEvent:
    kind: str
    t: float
    detail: str = ''


class HomGeometry(NamedTuple):
    dim: int
    alpha: float
    scalar: float            # R
    energy: float            # |∇φ|²
    s: float                 # S = R - α|∇φ|²
    volume: float
    ricci_eigs: Tuple[float, ...]   # eigenvalues of Rc relative to g, per factor
    s_eigs: Tuple[float, ...]       # eigenvalues of S_ij relative to g, per factor
    ricci_norm2: float
    riemann_norm2: float
    outer_norm2: float
    ricci_outer: float       # <Rc, ∇φ⊗∇φ>
    target_term: float
    s_norm2: float           # |S_ij|²
    hessian_norm2: float = 0.0
    tension_norm2: float = 0.0


class HomRates(NamedTuple):
    scale_dots: Tuple[float, ...]
    s_dot: float
    scalar_dot: float
    energy_dot: float
    volume_dot: float
    s_coefficient_dots: Tuple[float, ...]


class HomPointTensors(NamedTuple):
    """Explicit tensors at one point, in coordinates orthonormal for the unit factors."""
    metric: np.ndarray
    inverse: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    outer: np.ndarray
    s_tensor: np.ndarray
    target_riemann: np.ndarray


def _factor_data(state: HomogeneousState, model: ModelKind) -> List[Tuple[float, float]]:
    return list(zip(state.scales(model), model.signs))


def hom_geometry(state: HomogeneousState, model: ModelKind) -> HomGeometry:
    a = model.coupling(state.alpha)
    fx = _factor_data(state, model)
    scalar = sum(2 * k / x for x, k in fx)
    energy = sum(2 / x for x, _ in fx)
    volume = model.base_volume * math.prod(x for x, _ in fx)
    return HomGeometry(
        dim=model.dim,
        alpha=a,
        scalar=scalar,
        energy=energy,
        s=scalar - a * energy,
        volume=volume,
        ricci_eigs=tuple(k / x for x, k in fx),
        s_eigs=tuple((k - a) / x for x, k in fx),
        ricci_norm2=sum(2 / x ** 2 for x, _ in fx),
        riemann_norm2=sum(4 / x ** 2 for x, _ in fx),
        outer_norm2=sum(2 / x ** 2 for x, _ in fx),
        ricci_outer=sum(2 * k / x ** 2 for x, k in fx),
        target_term=sum(2 * k / x ** 2 for x, k in fx),
        s_norm2=sum(2 * (k - a) ** 2 / x ** 2 for x, k in fx),
    )


def model_rhs(state: HomogeneousState, model: ModelKind) -> Tuple[float, float]:
    """(ċ, ḋ); ḋ is 0 for the sphere."""
    a = model.coupling(state.alpha)
    fx = _factor_data(state, model)
    rates = [-2 * (k - a) for _, k in fx]
    if model.normalized:
        s = sum(2 * (k - a) / x for x, k in fx)
        rates = [r + (2.0 / model.dim) * s * x for r, (x, _) in zip(rates, fx)]
    if model.factors == 1:
        rates.append(0.0)
    return rates[0], rates[1]


def hom_rates(state: HomogeneousState, model: ModelKind, alpha_dot: Optional[float] = None) -> HomRates:
    """Exact time derivatives of the scalar geometry by the chain rule through model_rhs."""
    a = model.coupling(state.alpha)
    a_dot = 0.0 if model.flow == 'ricci' else (state.alpha_dot if alpha_dot is None else alpha_dot)
    fx = _factor_data(state, model)
    dots = model_rhs(state, model)[:model.factors]
    scalar_dot = sum(-2 * k * xd / x ** 2 for (x, k), xd in zip(fx, dots))
    energy_dot = sum(-2 * xd / x ** 2 for (x, _), xd in zip(fx, dots))
    s_dot = scalar_dot - a * energy_dot - a_dot * sum(2 / x for x, _ in fx)
    volume = model.base_volume * math.prod(x for x, _ in fx)
    volume_dot = volume * sum(xd / x for (x, _), xd in zip(fx, dots))
    return HomRates(
        scale_dots=tuple(dots),
        s_dot=s_dot,
        scalar_dot=scalar_dot,
        energy_dot=energy_dot,
        volume_dot=volume_dot,
        s_coefficient_dots=tuple(-a_dot for _ in fx),
    )


def homothety_sigma(state: HomogeneousState, model: ModelKind) -> float:
    """Soliton constant σ = ċ/2c of the unnormalized flow through this state."""
    return model_rhs(state, replace(model, normalized=False))[0] / (2 * state.c)


def _block_riemann(scales: Tuple[float, ...], signs: Tuple[float, ...]) -> np.ndarray:
    m = 2 * len(scales)
    riem = np.zeros((m, m, m, m))
    for k, (x, kappa) in enumerate(zip(scales, signs)):
        block = range(2 * k, 2 * k + 2)
        for a in block:
            for b in block:
                for c in block:
                    for d in block:
                        riem[a, b, c, d] = kappa * x * ((a == c) * (b == d) - (a == d) * (b == c))
    return riem


def hom_point_tensors(state: HomogeneousState, model: ModelKind) -> HomPointTensors:
    """Dense tensors of the model at a point; an independent check of hom_geometry."""
    a = model.coupling(state.alpha)
    scales = state.scales(model)
    diag = np.repeat(np.array(scales), 2)
    metric = np.diag(diag)
    inverse = np.diag(1.0 / diag)
    riemann = _block_riemann(scales, model.signs)
    ricci = np.einsum('kl,kilj->ij', inverse, riemann)
    outer = np.eye(model.dim)
    return HomPointTensors(
        metric=metric,
        inverse=inverse,
        riemann=riemann,
        ricci=ricci,
        outer=outer,
        s_tensor=ricci - a * outer,
        target_riemann=_block_riemann((1.0,) * model.factors, model.signs),
    )


def point_geometry_check(state: HomogeneousState, model: ModelKind) -> Dict[str, float]:
    """Largest deviations between hom_geometry and dense contractions of hom_point_tensors."""
    geo = hom_geometry(state, model)
    pt = hom_point_tensors(state, model)
    target = np.einsum('ij,pq,abcd,ia,pb,jc,qd->', pt.inverse, pt.inverse, pt.target_riemann,
                       pt.outer, pt.outer, pt.outer, pt.outer)
    dense = {
        'scalar': float(np.einsum('ij,ij->', pt.inverse, pt.ricci)),
        'energy': float(np.einsum('ij,ij->', pt.inverse, pt.outer)),
        'ricci_norm2': float(tensor_inner(pt.inverse, pt.ricci)),
        'riemann_norm2': float(riemann_norm2(pt.inverse, pt.riemann)),
        'outer_norm2': float(tensor_inner(pt.inverse, pt.outer)),
        'ricci_outer': float(tensor_inner(pt.inverse, pt.ricci, pt.outer)),
        's_norm2': float(tensor_inner(pt.inverse, pt.s_tensor)),
        'target_term': float(target),
    }
    return {k: abs(getattr(geo, k) - v) for k, v in dense.items()}


def lichnerowicz_at_point(state: HomogeneousState, model: ModelKind, t: np.ndarray) -> np.ndarray:
    """Δ_L of a parallel tensor: only the curvature terms survive."""
    pt = hom_point_tensors(state, model)
    return lichnerowicz_terms(pt.inverse, pt.riemann, pt.ricci, t)


def target_curvature_tensor_at_point(state: HomogeneousState, model: ModelKind) -> np.ndarray:
    """g^{pq} <Rm^N(∇_iφ, ∇_pφ)∇_qφ, ∇_jφ> for the identity map."""
    pt = hom_point_tensors(state, model)
    grad = pt.outer  # ∇φ is the identity in unit-factor coordinates
    return np.einsum('pq,abcd,ai,bp,cj,dq->ij', pt.inverse, pt.target_riemann, grad, grad, grad, grad)


# -- closed forms ------------------------------------------------------------

def closed_form(model: ModelKind, alpha: float, t: float, c0: float = 1.0, d0: float = 1.0) -> HomogeneousState:
    a = model.coupling(alpha)
    if not model.normalized:
        c = c0 + 2 * (a - 1) * t
        d = d0 + 2 * (a + 1) * t if model.family == ModelFamily.PRODUCT else 1.0
        return HomogeneousState(t, c, d, alpha)
    if model.family == ModelFamily.SPHERE2:
        return HomogeneousState(t, c0, 1.0, alpha)
    if abs(c0 * d0 - 1.0) > 1e-12:
        raise NoClosedFormError("normalized product closed forms need c0·d0 = 1")
    if model.flow == 'ricci':
        return HomogeneousState(t, math.tan(math.atan(c0) - t), math.tan(math.atan(d0) + t), alpha)
    if a == 1.0:
        return HomogeneousState(t, c0 / (1 + 2 * c0 * t), d0 + 2 * t, alpha)
    raise NoClosedFormError(f"no elementary solution for the normalized product with α = {alpha}")


def closed_form_extinction(model: ModelKind, alpha: float, c0: float = 1.0) -> float:
    """Extinction time of the unnormalized sphere factor, inf when it never collapses."""
    a = model.coupling(alpha)
    if model.normalized or a >= 1:
        return math.inf
    return c0 / (2 * (1 - a))


# -- integration ---------------------------------------------------------------

def _rates(model: ModelKind, schedule: CouplingSchedule, t: float, y: np.ndarray) -> np.ndarray:
    state = HomogeneousState(t, float(y[0]), float(y[1]), schedule(t))
    return np.array(model_rhs(state, model))


def _rk4_step(model: ModelKind, schedule: CouplingSchedule, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = _rates(model, schedule, t, y)
    k2 = _rates(model, schedule, t + h / 2, y + h / 2 * k1)
    k3 = _rates(model, schedule, t + h / 2, y + h / 2 * k2)
    k4 = _rates(model, schedule, t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _smallest(model: ModelKind, y: np.ndarray) -> float:
    return float(np.min(y[:model.factors]))


def _locate_extinction(model: ModelKind, schedule: CouplingSchedule, t0: float, y0: np.ndarray, h: float) -> float:
    """Bisect the RK4 substep length at which the smallest scale reaches zero."""
    def remaining(s: float) -> float:
        return _smallest(model, _rk4_step(model, schedule, t0, y0, s))

    lo, hi = 0.0, h
    for _ in range(1000):
        if not remaining(hi) > 0:
            break
        lo, hi = hi, hi + h
    while hi - lo > ROOT_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if remaining(mid) > 0:
            lo = mid
        else:
            hi = mid
    return t0 + 0.5 * (lo + hi)


@dataclass(frozen=True)
class HomTrajectory:
    model: ModelKind
    samples: Tuple[HomogeneousState, ...]
    events: Tuple[HomEvent, ...] = ()
    singularity: Optional[SingularityReport] = None
    schedule: Optional[CouplingSchedule] = None
    dt: float = 0.0
    _spline: Dict[str, CubicHermiteSpline] = field(default_factory=dict, compare=False, repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def c(self) -> np.ndarray:
        return np.array([s.c for s in self.samples])

    @property
    def d(self) -> np.ndarray:
        return np.array([s.d for s in self.samples])

    @property
    def final(self) -> HomogeneousState:
        return self.samples[-1]

    def _interpolant(self) -> CubicHermiteSpline:
        if 'scales' not in self._spline:
            if len(self.samples) < 2:
                raise InsufficientSamplesError("interpolation needs at least two samples")
            values = np.stack([self.c, self.d], axis=-1)
            slopes = np.array([model_rhs(s, self.model) for s in self.samples])
            self._spline['scales'] = CubicHermiteSpline(self.times, values, slopes, axis=0)
        return self._spline['scales']

    def state_at(self, t: float) -> HomogeneousState:
        """Hermite interpolation between samples, using the exact rates as slopes."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise CoverageError(f"t = {t} outside the trajectory range [{times[0]}, {times[-1]}]")
        c, d = self._interpolant()(t)
        if self.schedule is not None:
            alpha, alpha_dot = self.schedule(t), self.schedule.derivative(t)
        else:
            alpha = float(np.interp(t, times, [s.alpha for s in self.samples]))
            alpha_dot = float(np.interp(t, times, [s.alpha_dot for s in self.samples]))
        return HomogeneousState(float(t), float(c), float(d), alpha, alpha_dot)

    def diagnostic_series(self) -> DiagnosticSeries:
        rows = []
        for s in self.samples:
            geo = hom_geometry(s, self.model)
            rows.append({
                't': s.t, 'vol': geo.volume, 's_min': geo.s, 's_max': geo.s,
                'r_max': geo.scalar, 'energy_max': geo.energy,
                'rm_max': math.sqrt(geo.riemann_norm2), 'hess_max': 0.0,
                'alpha': geo.alpha, 'alpha_dot': 0.0 if self.model.flow == 'ricci' else s.alpha_dot,
            })
        return DiagnosticSeries.from_rows(self.model.dim, rows)


def integrate_model(model: ModelKind, schedule: CouplingSchedule, t_end: float, dt: float,
                    c0: float = 1.0, d0: float = 1.0, sample_stride: int = 1,
                    extinction_eps: float = EXTINCTION_EPS, t_start: float = 0.0) -> HomTrajectory:
    """Classical RK4 on the scale factors, with extinction located by bisection.

    A non-zero t_start continues a checkpointed run whose scales at t_start are (c0, d0).
    """
    if not dt > 0 or not t_end > t_start:
        raise ValueError("dt must be positive and t_end must lie after t_start")
    if sample_stride < 1:
        raise ValueError("sample_stride must be at least 1")
    if model.family == ModelFamily.SPHERE2:
        d0 = 1.0

    def make_state(t: float, y: np.ndarray) -> HomogeneousState:
        return HomogeneousState(t, float(y[0]), float(y[1]), schedule(t), schedule.derivative(t))

    y = np.array([c0, d0], dtype=float)
    t = t_start
    samples = [make_state(t, y)]
    events: List[HomEvent] = []
    singularity = None
    fixed_seen = False
    n_steps = max(1, int(math.ceil((t_end - t_start) / dt - 1e-9)))

    logger.info(f"Integrating {model.family.value} (normalized={model.normalized}, flow={model.flow}) "
                f"to t={t_end} with dt={dt}")

    for k in range(1, n_steps + 1):
        if not fixed_seen and max(abs(r) for r in _rates(model, schedule, t, y)) <= FIXED_POINT_TOLERANCE:
            events.append(HomEvent('fixed_point', t, f"scales {tuple(y[:model.factors])}"))
            fixed_seen = True
        t_next = t_end if k == n_steps else t_start + k * dt
        y_new = _rk4_step(model, schedule, t, y, t_next - t)
        if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > BLOWUP_SCALE:
            singularity = SingularityReport(t, 'blow-up', samples[-1], {'c': float(y[0]), 'd': float(y[1])},
                                            ('scale',))
            events.append(HomEvent('blow-up', t))
            logger.warning(f"Scale factors left the finite range after t={t}")
            break
        if _smallest(model, y_new) <= extinction_eps:
            t_sing = _locate_extinction(model, schedule, t, y, t_next - t)
            last = make_state(t, y)
            if samples[-1].t != t:
                samples.append(last)
            singularity = SingularityReport(t_sing, 'extinction', last,
                                            {'c': float(y[0]), 'd': float(y[1])}, ('scale',))
            events.append(HomEvent('extinction', t_sing))
            logger.info(f"Extinction at t={t_sing:.10f}")
            break
        t, y = t_next, y_new
        if k % sample_stride == 0 or k == n_steps:
            samples.append(make_state(t, y))

    return HomTrajectory(model, tuple(samples), tuple(events), singularity, schedule, dt)


# -- volume normalization --------------------------------------------------------

def renormalize(traj: HomTrajectory) -> HomTrajectory:
    """Rescale by λ = vol^{-2/m} and reparametrize time by t̄ = ∫λ dt."""
    if len(traj.samples) < 2:
        raise InsufficientSamplesError("renormalize needs at least two samples")
    model = traj.model
    m = model.dim
    lam, lam_dot = [], []
    for s in traj.samples:
        rates = hom_rates(s, model)
        vol = model.base_volume * math.prod(s.scales(model))
        value = vol ** (-2.0 / m)
        lam.append(value)
        lam_dot.append(-(2.0 / m) * value * rates.volume_dot / vol)

    times = traj.times
    t_bar = [0.0]
    for i in range(1, len(times)):
        h = times[i] - times[i - 1]
        # trapezoid with end corrections, exact for cubics
        t_bar.append(t_bar[-1] + h / 2 * (lam[i - 1] + lam[i]) + h ** 2 / 12 * (lam_dot[i - 1] - lam_dot[i]))

    samples = tuple(
        HomogeneousState(tb, lam[i] * s.c, lam[i] * s.d if model.factors == 2 else 1.0,
                         s.alpha, s.alpha_dot / lam[i])
        for i, (tb, s) in enumerate(zip(t_bar, traj.samples)))
    events = list(traj.events)
    if traj.singularity is not None:
        events.append(HomEvent('truncated', t_bar[-1], f"source run ended at t={traj.singularity.t}"))
    return HomTrajectory(replace(model, normalized=True), samples, tuple(events), None, None, traj.dt)


def compare_trajectories(reference: HomTrajectory, other: HomTrajectory) -> float:
    """Largest scale difference of `reference` samples against `other` on their common time range."""
    t_lo = max(reference.times[0], other.times[0])
    t_hi = min(reference.times[-1], other.times[-1])
    worst = 0.0
    for s in reference.samples:
        if t_lo <= s.t <= t_hi:
            o = other.state_at(s.t)
            worst = max(worst, abs(s.c - o.c), abs(s.d - o.d) if reference.model.factors == 2 else 0.0)
    return worst


# -- breathers -------------------------------------------------------------------

@dataclass(frozen=True)
class BreatherPair:
    t1: float
    t2: float
    scale: float
    label: str
    soliton: bool = True


@dataclass
class BreatherReport:
    pairs: List[BreatherPair]
    pairs_checked: int
    samples_used: int

    def labels(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for p in self.pairs:
            counts[p.label] = counts.get(p.label, 0) + 1
        return counts

    def to_dict(self) -> Dict[str, object]:
        return {
            'pairs_checked': self.pairs_checked,
            'samples_used': self.samples_used,
            'labels': self.labels(),
            'pairs': [{'t1': p.t1, 't2': p.t2, 'scale': p.scale, 'label': p.label} for p in self.pairs[:100]],
        }


def breather_scan(traj: HomTrajectory, tolerance: float = BREATHER_TOLERANCE,
                  max_samples: int = 64) -> BreatherReport:
    """Pairs of samples whose states differ by a single scale factor.

    Isometries of the homogeneous models act trivially on (c, d), so
    state(t₂) = scale·ψ*state(t₁) reduces to equal ratios of every factor.
    """
    n = len(traj.samples)
    if n < 2:
        raise InsufficientSamplesError("breather scan needs at least two samples")
    picks = np.unique(np.linspace(0, n - 1, min(n, max_samples)).astype(int))
    chosen = [traj.samples[i] for i in picks]
    pairs: List[BreatherPair] = []
    checked = 0
    for i, s1 in enumerate(chosen):
        for s2 in chosen[i + 1:]:
            checked += 1
            ratios = [b / a for a, b in zip(s1.scales(traj.model), s2.scales(traj.model))]
            scale = ratios[0]
            if all(abs(r - scale) <= tolerance * max(1.0, abs(scale)) for r in ratios[1:]):
                if abs(scale - 1) <= tolerance:
                    label = 'steady'
                elif scale < 1:
                    label = 'shrinking'
                else:
                    label = 'expanding'
                pairs.append(BreatherPair(s1.t, s2.t, scale, label))
    logger.debug(f"Breather scan: {len(pairs)} of {checked} pairs are homothetic")
    return BreatherReport(pairs, checked, len(chosen))
