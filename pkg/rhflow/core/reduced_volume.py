"""
Backwards reduced distance and reduced volume along a computed trajectory.

Paths run backwards from the base point p at time t₀: the path parameter τ
corresponds to time t₀ - τ. They are discretized on uniform nodes in
λ = √τ, where the weighted action becomes

    L(η) = ∫₀^{√τ₁} (2λ² S(η, λ²) + ½ |dη/dλ|²_{g(λ²)}) dλ

and is evaluated with the midpoint rule on each segment. Fields are
interpolated bilinearly in space (periodically) and linearly in time.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize

from ..utils.error_handler import CoverageError, InsufficientSamplesError
from ..utils.metrics import MetricsManager
from .deturck import Trajectory
from .grid_tensor import analyze_state, compute_geometry
from .homogeneous import HomTrajectory, ModelFamily, hom_geometry
from .reports import CheckResult, MonitorReport, Verdict, verdict_for

logger = logging.getLogger(__name__)

MIN_NODES = 16
DEFAULT_NODES = 32
STATIONARITY_TOLERANCE = 1e-6
MONOTONE_TOLERANCE = 1e-4
SEED_PERTURBATION = 0.1
SPHERE_ANGLE_NODES = 48


@dataclass(frozen=True)
class DiscretePath:
    """Positions η(λ_k²) on K+1 uniform λ-nodes over [0, √τ₁], starting at the base point."""
    base: np.ndarray
    tau1: float
    positions: np.ndarray  # (K+1, m), unwrapped coordinates

    def __post_init__(self):
        if not self.tau1 > 0:
            raise ValueError("τ₁ must be positive")
        if self.positions.ndim != 2 or len(self.positions) < MIN_NODES + 1:
            raise ValueError(f"paths need at least {MIN_NODES} segments")
        if not np.allclose(self.positions[0], self.base, atol=0.0, rtol=0.0):
            raise ValueError("paths must start at the base point")

    @property
    def segments(self) -> int:
        return len(self.positions) - 1

    @property
    def dlam(self) -> float:
        return math.sqrt(self.tau1) / self.segments

    @property
    def lambdas(self) -> np.ndarray:
        return np.linspace(0.0, math.sqrt(self.tau1), self.segments + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.positions[1:] + self.positions[:-1])

    @property
    def velocities(self) -> np.ndarray:
        """dη/dλ per segment."""
        return np.diff(self.positions, axis=0) / self.dlam

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]

    @classmethod
    def straight(cls, base: Sequence[float], end: Sequence[float], tau1: float,
                 segments: int = DEFAULT_NODES) -> 'DiscretePath':
        """Straight in λ, which is the L-geodesic of a static flat metric."""
        base = np.atleast_1d(np.asarray(base, dtype=float))
        end = np.atleast_1d(np.asarray(end, dtype=float))
        s = np.linspace(0.0, 1.0, segments + 1)[:, None]
        return cls(base, tau1, base + s * (end - base))

    @classmethod
    def from_function(cls, base: Sequence[float], tau1: float, eta, segments: int = DEFAULT_NODES) -> 'DiscretePath':
        """Sample η(τ) on the λ-nodes; eta maps an array of τ to (K+1, m) positions."""
        base = np.atleast_1d(np.asarray(base, dtype=float))
        lam = np.linspace(0.0, math.sqrt(tau1), segments + 1)
        positions = np.asarray(eta(lam ** 2), dtype=float).reshape(segments + 1, -1)
        positions[0] = base
        return cls(base, tau1, positions)

    def with_interior(self, interior: np.ndarray) -> 'DiscretePath':
        positions = self.positions.copy()
        positions[1:-1] = interior.reshape(self.segments - 1, -1)
        return DiscretePath(self.base, self.tau1, positions)


# -- space-time fields ---------------------------------------------------------------

def _bilinear(values: np.ndarray, points: np.ndarray, spacing: float, layer: np.ndarray):
    """Periodic multilinear interpolation of values[layer_k] at points[k].

    values has shape (layers, N, ..., N, *components); returns the values
    (P, *components) and their spatial gradients (P, *components, m).
    """
    m = points.shape[1]
    n = values.shape[1]
    u = points / spacing
    base = np.floor(u).astype(int)
    frac = u - base
    comp = values.shape[1 + m:]
    expand = (slice(None),) + (None,) * len(comp)
    val = np.zeros((len(points),) + comp)
    grad = np.zeros((len(points),) + comp + (m,))
    for corner in itertools.product((0, 1), repeat=m):
        idx = (layer,) + tuple((base[:, a] + corner[a]) % n for a in range(m))
        parts = [frac[:, a] if corner[a] else 1.0 - frac[:, a] for a in range(m)]
        v = values[idx]
        val += np.prod(parts, axis=0)[expand] * v
        for a in range(m):
            others = np.prod([parts[b] for b in range(m) if b != a], axis=0) if m > 1 else 1.0
            sign = 1.0 if corner[a] else -1.0
            grad[..., a] += (sign / spacing * others * np.ones(len(points)))[expand] * v
    return val, grad


@dataclass
class PathField:
    """S and g of a grid trajectory blended to the midpoint times of a λ-grid."""
    spacing: float
    period: float
    s: np.ndarray        # (K, N, ..., N)
    g: np.ndarray        # (K, N, ..., N, m, m)
    lam_mid: np.ndarray  # (K,)

    @classmethod
    def build(cls, traj: Trajectory, t0: float, tau1: float, segments: int, cache=None) -> 'PathField':
        if t0 - tau1 < traj.times[0] - 1e-12 or t0 > traj.times[-1] + 1e-12:
            raise CoverageError(f"paths over [{t0 - tau1}, {t0}] leave the trajectory range "
                                f"[{traj.times[0]}, {traj.times[-1]}]")
        lam = np.linspace(0.0, math.sqrt(tau1), segments + 1)
        lam_mid = 0.5 * (lam[1:] + lam[:-1])
        fields: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

        def snapshot(i: int) -> Tuple[np.ndarray, np.ndarray]:
            if i not in fields:
                state = traj.samples[i]
                geo = analyze_state(state.geom, state.g, state.phi, state.target, cache)
                fields[i] = (geo.s_fields(traj.schedule(state.t))[1], state.g)
            return fields[i]

        s_layers, g_layers = [], []
        for lm in lam_mid:
            i, w = traj.bracket(t0 - lm ** 2)
            s_i, g_i = snapshot(i)
            if w > 0:
                s_j, g_j = snapshot(i + 1)
                s_i, g_i = (1 - w) * s_i + w * s_j, (1 - w) * g_i + w * g_j
            s_layers.append(s_i)
            g_layers.append(g_i)
        geom = traj.geom
        return cls(geom.spacing, geom.period, np.stack(s_layers), np.stack(g_layers), lam_mid)

    def action(self, path: DiscretePath, with_gradient: bool = False):
        """L(η) and optionally dL/dη at every node."""
        layer = np.arange(len(self.lam_mid))
        mid = np.mod(path.midpoints, self.period)
        w = path.velocities
        dlam = path.dlam
        s_val, s_grad = _bilinear(self.s, mid, self.spacing, layer)
        g_val, g_grad = _bilinear(self.g, mid, self.spacing, layer)
        kinetic = np.einsum('ki,kij,kj->k', w, g_val, w)
        value = float(np.sum((2 * self.lam_mid ** 2 * s_val + 0.5 * kinetic) * dlam))
        if not with_gradient:
            return value
        d_mid = dlam * (2 * self.lam_mid[:, None] ** 2 * s_grad
                        + 0.5 * np.einsum('ki,kija,kj->ka', w, g_grad, w))
        d_vel = dlam * np.einsum('kij,kj->ki', g_val, w)
        grad = np.zeros_like(path.positions)
        grad[:-1] += 0.5 * d_mid - d_vel / dlam
        grad[1:] += 0.5 * d_mid + d_vel / dlam
        return value, grad


@dataclass
class SpherePathField:
    """Great-circle paths in the homogeneous Sphere2 model; positions are angles."""
    c: np.ndarray        # c at the midpoint times
    s: np.ndarray        # S at the midpoint times
    lam_mid: np.ndarray

    @classmethod
    def build(cls, traj: HomTrajectory, t0: float, tau1: float, segments: int) -> 'SpherePathField':
        if traj.model.family != ModelFamily.SPHERE2:
            raise ValueError("the great-circle adapter needs the Sphere2 model")
        lam = np.linspace(0.0, math.sqrt(tau1), segments + 1)
        lam_mid = 0.5 * (lam[1:] + lam[:-1])
        states = [traj.state_at(t0 - lm ** 2) for lm in lam_mid]
        c = np.array([st.c for st in states])
        s = np.array([hom_geometry(st, traj.model).s for st in states])
        return cls(c, s, lam_mid)

    def action(self, path: DiscretePath, with_gradient: bool = False):
        w = path.velocities[:, 0]
        dlam = path.dlam
        value = float(np.sum((2 * self.lam_mid ** 2 * self.s + 0.5 * self.c * w ** 2) * dlam))
        if not with_gradient:
            return value
        d_vel = (self.c * w)[:, None]
        grad = np.zeros_like(path.positions)
        grad[:-1] -= d_vel
        grad[1:] += d_vel
        return value, grad


AnyField = Union[PathField, SpherePathField]


def _path_field(traj, t0: float, tau1: float, segments: int, cache=None) -> AnyField:
    if isinstance(traj, HomTrajectory):
        return SpherePathField.build(traj, t0, tau1, segments)
    return PathField.build(traj, t0, tau1, segments, cache)


def lb_length(path: DiscretePath, traj: Union[Trajectory, HomTrajectory], t0: Optional[float] = None,
              cache=None) -> float:
    """∫₀^{τ₁} √τ (S + |dη/dτ|²) dτ along a discrete path ending its backward sweep at t0 - τ₁."""
    t0 = traj.times[-1] if t0 is None else t0
    return _path_field(traj, t0, path.tau1, path.segments, cache).action(path)


# -- reduced distance -----------------------------------------------------------------

@dataclass
class DistanceResult:
    value: float
    path: DiscretePath
    stationarity: float
    approximate: bool
    seed_values: List[float] = field(default_factory=list)


def _optimize_path(pf: AnyField, seed: DiscretePath, max_iter: int) -> Tuple[DiscretePath, float, float]:
    def objective(x: np.ndarray):
        value, grad = pf.action(seed.with_interior(x), with_gradient=True)
        return value, grad[1:-1].ravel()

    x0 = seed.positions[1:-1].ravel()
    res = optimize.minimize(objective, x0, jac=True, method='L-BFGS-B',
                            options={'maxiter': max_iter, 'gtol': 1e-12, 'ftol': 1e-15})
    best = seed.with_interior(res.x)
    _, grad = pf.action(best, with_gradient=True)
    # per-node gradient scaled back to a derivative in λ
    stationarity = float(np.max(np.abs(grad[1:-1]))) / seed.dlam if seed.segments > 1 else 0.0
    return best, float(res.fun), stationarity


def _translates(q: np.ndarray, period: float) -> List[np.ndarray]:
    m = len(q)
    return [q + period * np.array(shift) for shift in itertools.product((-1, 0, 1), repeat=m)]


def reduced_distance(q: Sequence[float], tau1: float, traj: Union[Trajectory, HomTrajectory],
                     base: Optional[Sequence[float]] = None, t0: Optional[float] = None,
                     segments: int = DEFAULT_NODES, starts: int = 5, seed: int = 0,
                     max_iter: int = 500, cache=None, pf: Optional[AnyField] = None) -> DistanceResult:
    """ℓ_b(q, τ₁) = inf L(η) / (2√τ₁) over discrete paths from the base point to q.

    Grid runs try the straight seed towards each of the 3^m lattice translates
    of q, plus perturbed copies of the best one. Homogeneous Sphere2 runs take
    q as the angle from the base point along a great circle.
    """
    if segments < MIN_NODES:
        raise ValueError(f"need at least {MIN_NODES} segments")
    t0 = traj.times[-1] if t0 is None else t0
    q = np.atleast_1d(np.asarray(q, dtype=float))
    base = np.zeros_like(q) if base is None else np.atleast_1d(np.asarray(base, dtype=float))
    pf = pf if pf is not None else _path_field(traj, t0, tau1, segments, cache)
    rng = np.random.default_rng(seed)

    if isinstance(pf, PathField):
        ends = _translates(q, pf.period)
    else:
        ends = [q]
    seeds = [DiscretePath.straight(base, end, tau1, segments) for end in ends]
    straight_values = [pf.action(s) for s in seeds]
    best_seed = seeds[int(np.argmin(straight_values))]
    bump = np.sin(np.pi * np.linspace(0.0, 1.0, segments + 1))[:, None]
    bump[[0, -1]] = 0.0
    for _ in range(max(0, starts - 1)):
        shift = SEED_PERTURBATION * rng.normal(size=q.shape)
        seeds.append(DiscretePath(base, tau1, best_seed.positions + bump * shift))

    finals = [_optimize_path(pf, s, max_iter) for s in seeds]
    k = int(np.argmin([f[1] for f in finals]))
    path, value, stationarity = finals[k]
    approximate = stationarity > STATIONARITY_TOLERANCE
    if approximate:
        logger.debug(f"Reduced distance at q={q.tolist()} is approximate (stationarity {stationarity:.2e})")
    scale = 1.0 / (2 * math.sqrt(tau1))
    return DistanceResult(value * scale, path, stationarity, approximate, [f[1] * scale for f in finals])


def flat_distance_oracle(q: Sequence[float], base: Sequence[float], tau1: float, period: float) -> float:
    """|q - p|²/(4τ₁) with the periodic distance."""
    diff = np.abs(np.atleast_1d(np.asarray(q, dtype=float)) - np.atleast_1d(np.asarray(base, dtype=float)))
    diff = np.mod(diff, period)
    diff = np.minimum(diff, period - diff)
    return float(np.sum(diff ** 2) / (4 * tau1))


def sphere_distance_oracle(traj: HomTrajectory, theta: float, tau1: float, t0: Optional[float] = None) -> float:
    """(2√τ₁)⁻¹ (∫√τ S dτ + θ² / ∫ dτ/(√τ c)) for great-circle paths."""
    t0 = traj.times[-1] if t0 is None else t0
    root = math.sqrt(tau1)

    def state(lam: float):
        return traj.state_at(t0 - lam * lam)

    potential, _ = integrate.quad(lambda lam: 2 * lam * lam * hom_geometry(state(lam), traj.model).s,
                                  0.0, root, epsabs=1e-13, epsrel=1e-12)
    inverse, _ = integrate.quad(lambda lam: 2.0 / state(lam).c, 0.0, root, epsabs=1e-13, epsrel=1e-12)
    return (potential + theta ** 2 / inverse) / (2 * root)


# -- reduced volume ---------------------------------------------------------------------

@dataclass
class ReducedVolumeReport:
    taus: List[float]
    values: List[float]
    distances: Dict[float, List[float]] = field(default_factory=dict)
    approximate: int = 0
    checks: MonitorReport = field(default_factory=MonitorReport)

    @property
    def ok(self) -> bool:
        return self.checks.ok

    def to_dict(self) -> Dict[str, object]:
        return {
            'taus': list(self.taus),
            'values': list(self.values),
            'approximate_distances': self.approximate,
            'distances': {str(k): list(v) for k, v in self.distances.items()},
            'checks': self.checks.to_dict(),
        }


def _grid_volume(traj: Trajectory, tau: float, t0: float, base: np.ndarray, segments: int, starts: int,
                 endpoint_stride: int, threads: int, seed: int, cache) -> Tuple[float, List[float], int]:
    pf = PathField.build(traj, t0, tau, segments, cache)
    geom = traj.geom
    i, w = traj.bracket(t0 - tau)
    g_end = traj.samples[i].g if w == 0 else (1 - w) * traj.samples[i].g + w * traj.samples[i + 1].g
    weights = compute_geometry(geom, g_end).volume_weight
    index = tuple(slice(None, None, endpoint_stride) for _ in range(geom.dim))
    coords = np.stack([c[index] for c in geom.coordinates()], axis=-1).reshape(-1, geom.dim)
    cell = weights[index].ravel() * endpoint_stride ** geom.dim

    def solve(q: np.ndarray) -> DistanceResult:
        return reduced_distance(q, tau, traj, base, t0, segments, starts, seed, pf=pf)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(solve, coords))
    ell = np.array([r.value for r in results])
    value = float(np.sum((4 * math.pi * tau) ** (-geom.dim / 2) * np.exp(-ell) * cell))
    return value, ell.tolist(), sum(r.approximate for r in results)


def _sphere_volume(traj: HomTrajectory, tau: float, t0: float, segments: int = DEFAULT_NODES,
                   nodes: int = SPHERE_ANGLE_NODES) -> Tuple[float, List[float], int]:
    """Gauss-Legendre in the polar angle, with ℓ_b from the path optimizer at every node."""
    pf = SpherePathField.build(traj, t0, tau, segments)
    c_end = traj.state_at(t0 - tau).c
    x, w = np.polynomial.legendre.leggauss(nodes)
    thetas = 0.5 * math.pi * (x + 1)
    results = [reduced_distance([th], tau, traj, t0=t0, segments=segments, starts=1, pf=pf) for th in thetas]
    ell = np.array([r.value for r in results])
    density = 0.5 * math.pi * float(np.sum(w * np.exp(-ell) * 2 * math.pi * c_end * np.sin(thetas)))
    return density / (4 * math.pi * tau), ell.tolist(), sum(r.approximate for r in results)


def sphere_volume_oracle(traj: HomTrajectory, tau: float, t0: Optional[float] = None) -> float:
    """Ṽ_b of the Sphere2 model from the great-circle closed form of ℓ_b."""
    t0 = traj.times[-1] if t0 is None else t0
    c_end = traj.state_at(t0 - tau).c
    density, _ = integrate.quad(
        lambda th: math.exp(-sphere_distance_oracle(traj, th, tau, t0)) * 2 * math.pi * c_end * math.sin(th),
        0.0, math.pi, epsabs=1e-13, epsrel=1e-12)
    return density / (4 * math.pi * tau)


def reduced_volume(tau: float, traj: Union[Trajectory, HomTrajectory], t0: Optional[float] = None,
                   base: Optional[Sequence[float]] = None, segments: int = DEFAULT_NODES, starts: int = 5,
                   endpoint_stride: int = 1, threads: int = 1, seed: int = 0, cache=None) -> float:
    """Ṽ_b(τ) = ∫ (4πτ)^{-m/2} e^{-ℓ_b(q, τ)} dV(q), with dV taken at time t₀ - τ."""
    t0 = traj.times[-1] if t0 is None else t0
    if isinstance(traj, HomTrajectory):
        return _sphere_volume(traj, tau, t0, segments)[0]
    base = np.zeros(traj.geom.dim) if base is None else np.asarray(base, dtype=float)
    return _grid_volume(traj, tau, t0, base, segments, starts, endpoint_stride, threads, seed, cache)[0]


def reduced_volume_series(traj: Union[Trajectory, HomTrajectory], taus: Sequence[float],
                          t0: Optional[float] = None, base: Optional[Sequence[float]] = None,
                          segments: int = DEFAULT_NODES, starts: int = 5, endpoint_stride: int = 1,
                          threads: int = 1, seed: int = 0, tolerance: float = MONOTONE_TOLERANCE,
                          metrics: Optional[MetricsManager] = None, cache=None) -> ReducedVolumeReport:
    """Ṽ_b over increasing τ with positivity and monotonicity verdicts."""
    taus = sorted(float(t) for t in taus)
    if len(taus) < 2:
        raise InsufficientSamplesError("a reduced-volume series needs at least two τ values")
    t0 = traj.times[-1] if t0 is None else t0
    started = time.perf_counter()
    report = ReducedVolumeReport(taus=taus, values=[])
    for tau in taus:
        if isinstance(traj, HomTrajectory):
            value, ell, approx = _sphere_volume(traj, tau, t0, segments)
        else:
            b = np.zeros(traj.geom.dim) if base is None else np.asarray(base, dtype=float)
            value, ell, approx = _grid_volume(traj, tau, t0, b, segments, starts, endpoint_stride,
                                              threads, seed, cache)
        report.values.append(value)
        report.distances[tau] = ell
        report.approximate += approx
        logger.debug(f"Ṽ_b(τ={tau:g}) = {value:.10g}")
    if metrics is not None:
        metrics.track_phase('reduced_volume', time.perf_counter() - started)

    values = np.array(report.values)
    increase = float(np.max(np.diff(values), initial=0.0))
    report.checks.add(CheckResult('reduced_volume_non_increasing', verdict_for(max(0.0, increase), tolerance),
                                  residual=max(0.0, increase), tolerance=tolerance,
                                  details={'largest_increase': increase}))
    smallest = float(np.min(values))
    report.checks.add(CheckResult('reduced_volume_positive', Verdict.PASS if smallest > 0 else Verdict.FAIL,
                                  residual=max(0.0, -smallest), details={'smallest': smallest}))
    if report.approximate:
        logger.warning(f"{report.approximate} reduced distances did not reach the stationarity tolerance")
    logger.info(f"Reduced volume over {len(taus)} τ values: {report.values[0]:.6g} -> {report.values[-1]:.6g}")
    return report
