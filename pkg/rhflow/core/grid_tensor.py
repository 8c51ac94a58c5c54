"""
Discrete Riemannian tensor calculus on flat periodic grids.

Fields are numpy arrays whose leading axes are the grid axes, followed by
component axes. Christoffel symbols are stored as gamma[..., k, i, j] = Γ^k_ij.
The Riemann tensor follows

    R^r_{s m n} = ∂_m Γ^r_{ns} - ∂_n Γ^r_{ms} + Γ^r_{ml} Γ^l_{ns} - Γ^r_{nl} Γ^l_{ms}

lowered on its first slot, so that R_ij = g^{kl} R_{kilj} and round spheres
have positive scalar curvature. All spatial derivatives are fourth-order
central differences with periodic wrap-around.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from ..utils.cache import LRUCache, array_key
from ..utils.error_handler import ConstraintViolationError, DegenerateMetricError

logger = logging.getLogger(__name__)

DEGENERACY_THRESHOLD = 1e-8
CONSTRAINT_TOLERANCE = 1e-8

_SLOT_LETTERS = 'bcdefghi'


@dataclass(frozen=True)
class GridGeometry:
    """Uniform periodic grid on the flat torus of side `period`."""
    dim: int
    nodes: int
    period: float = 2 * math.pi

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got {self.dim}")
        if self.nodes < 8:
            raise ValueError(f"need at least 8 nodes per axis, got {self.nodes}")
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")

    @property
    def spacing(self) -> float:
        return self.period / self.nodes

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.nodes,) * self.dim

    @property
    def node_count(self) -> int:
        return self.nodes ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    def axis(self) -> np.ndarray:
        return np.arange(self.nodes) * self.spacing

    def coordinates(self) -> Tuple[np.ndarray, ...]:
        """Node coordinates, one array of shape `self.shape` per axis."""
        x = self.axis()
        return tuple(np.meshgrid(*([x] * self.dim), indexing='ij'))

    def refine(self, factor: int) -> 'GridGeometry':
        return GridGeometry(self.dim, self.nodes * factor, self.period)

    def identity_metric(self) -> np.ndarray:
        return np.broadcast_to(np.eye(self.dim), self.shape + (self.dim, self.dim)).copy()


@dataclass(frozen=True)
class TargetSpec:
    """Target of the map: the flat line or a round sphere embedded in R^d."""
    kind: str
    radius: float = 1.0
    embedding_dim: int = 3

    def __post_init__(self):
        if self.kind not in ('flat', 'sphere'):
            raise ValueError(f"unknown target kind '{self.kind}'")
        if not self.radius > 0:
            raise ValueError(f"target radius must be positive, got {self.radius}")
        if self.kind == 'flat' and self.embedding_dim != 1:
            raise ValueError("flat-scalar targets have embedding dimension 1")
        if self.kind == 'sphere' and self.embedding_dim < 2:
            raise ValueError("sphere targets need embedding dimension >= 2")

    @classmethod
    def flat_scalar(cls) -> 'TargetSpec':
        return cls('flat', 1.0, 1)

    @classmethod
    def sphere(cls, radius: float = 1.0, embedding_dim: int = 3) -> 'TargetSpec':
        return cls('sphere', radius, embedding_dim)

    @property
    def is_sphere(self) -> bool:
        return self.kind == 'sphere'

    @property
    def curvature_bound(self) -> float:
        """Upper bound c0 for the sectional curvature of the target."""
        return 1.0 / self.radius ** 2 if self.is_sphere else 0.0

    def project(self, phi: np.ndarray) -> np.ndarray:
        if not self.is_sphere:
            return phi
        return self.radius * phi / np.linalg.norm(phi, axis=-1, keepdims=True)

    def tangent_part(self, phi: np.ndarray, v: np.ndarray, axis: int = -1) -> np.ndarray:
        """Apply P = I - phi phi^T / rho^2 along the component `axis` of v."""
        if not self.is_sphere:
            return v
        v = np.moveaxis(v, axis, -1)
        extra = v.ndim - phi.ndim
        p = phi.reshape(phi.shape[:-1] + (1,) * extra + phi.shape[-1:])
        out = v - p * (np.sum(p * v, axis=-1, keepdims=True) / self.radius ** 2)
        return np.moveaxis(out, -1, axis)


# -- finite differences ----------------------------------------------------

def partial(geom: GridGeometry, f: np.ndarray, axis: int) -> np.ndarray:
    """Fourth-order central first derivative along grid axis `axis`."""
    return (-np.roll(f, -2, axis) + 8 * np.roll(f, -1, axis)
            - 8 * np.roll(f, 1, axis) + np.roll(f, 2, axis)) / (12 * geom.spacing)


def second_partial(geom: GridGeometry, f: np.ndarray, a: int, b: int) -> np.ndarray:
    if a != b:
        return partial(geom, partial(geom, f, a), b)
    return (-np.roll(f, -2, a) + 16 * np.roll(f, -1, a) - 30 * f
            + 16 * np.roll(f, 1, a) - np.roll(f, 2, a)) / (12 * geom.spacing ** 2)


def gradient(geom: GridGeometry, f: np.ndarray) -> np.ndarray:
    """Stack of partials; the new derivative axis sits right after the grid axes."""
    return np.stack([partial(geom, f, a) for a in range(geom.dim)], axis=geom.dim)


def second_derivatives(geom: GridGeometry, f: np.ndarray) -> np.ndarray:
    m = geom.dim
    rows = []
    for a in range(m):
        rows.append(np.stack([second_partial(geom, f, a, b) for b in range(m)], axis=m))
    return np.stack(rows, axis=m)


# -- metric algebra --------------------------------------------------------

class MetricAlgebra(NamedTuple):
    inverse: np.ndarray
    det: np.ndarray
    volume_weight: np.ndarray


def check_positive_definite(g: np.ndarray, threshold: float = DEGENERACY_THRESHOLD) -> None:
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[0]
        raise DegenerateMetricError(tuple(int(i) for i in bad[:-2]), float('nan'))
    lowest = np.linalg.eigvalsh(g)[..., 0]
    idx = int(np.argmin(lowest))
    if lowest.flat[idx] < threshold:
        node = tuple(int(i) for i in np.unravel_index(idx, lowest.shape))
        raise DegenerateMetricError(node, float(lowest.flat[idx]))


def symmetrize(t: np.ndarray) -> np.ndarray:
    return 0.5 * (t + np.swapaxes(t, -1, -2))


def metric_algebra(geom: GridGeometry, g: np.ndarray) -> MetricAlgebra:
    check_positive_definite(g)
    inverse = symmetrize(np.linalg.inv(g))
    det = np.linalg.det(g)
    return MetricAlgebra(inverse, det, np.sqrt(det) * geom.cell_volume)


def _christoffel_lower(dg: np.ndarray) -> np.ndarray:
    """Γ_{l,ij} = ½(∂i g_jl + ∂j g_il - ∂l g_ij) from dg[..., a, i, j] = ∂a g_ij."""
    return 0.5 * (np.einsum('...ijl->...lij', dg) + np.einsum('...jil->...lij', dg) - dg)


def christoffel(geom: GridGeometry, g: np.ndarray, inverse: Optional[np.ndarray] = None) -> np.ndarray:
    if inverse is None:
        inverse = metric_algebra(geom, g).inverse
    gamma = np.einsum('...kl,...lij->...kij', inverse, _christoffel_lower(gradient(geom, g)))
    return symmetrize(gamma)


class Curvature(NamedTuple):
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray


def _riemann_linear(dgamma: np.ndarray) -> np.ndarray:
    return np.einsum('...mrns->...rsmn', dgamma) - np.einsum('...nrms->...rsmn', dgamma)


def _riemann_quadratic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum('...rml,...lns->...rsmn', a, b) - np.einsum('...rnl,...lms->...rsmn', a, b)


def _riemann_up(geom: GridGeometry, gamma: np.ndarray) -> np.ndarray:
    return _riemann_linear(gradient(geom, gamma)) + _riemann_quadratic(gamma, gamma)


def _curvature_from(geom: GridGeometry, g: np.ndarray, inverse: np.ndarray, gamma: np.ndarray) -> Curvature:
    riemann = np.einsum('...ar,...rsmn->...asmn', g, _riemann_up(geom, gamma))
    ricci = symmetrize(np.einsum('...kl,...kilj->...ij', inverse, riemann))
    scalar = np.einsum('...ij,...ij->...', inverse, ricci)
    return Curvature(riemann, ricci, scalar)


def curvature(geom: GridGeometry, g: np.ndarray) -> Curvature:
    alg = metric_algebra(geom, g)
    return _curvature_from(geom, g, alg.inverse, christoffel(geom, g, alg.inverse))


@dataclass(frozen=True)
class GeometryBundle:
    """Everything derived from a metric snapshot."""
    geom: GridGeometry
    g: np.ndarray
    inverse: np.ndarray
    det: np.ndarray
    volume_weight: np.ndarray
    gamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: np.ndarray

    @property
    def volume(self) -> float:
        return float(np.sum(self.volume_weight))


def compute_geometry(geom: GridGeometry, g: np.ndarray, cache: Optional[LRUCache] = None) -> GeometryBundle:
    def build() -> GeometryBundle:
        alg = metric_algebra(geom, g)
        gamma = christoffel(geom, g, alg.inverse)
        curv = _curvature_from(geom, g, alg.inverse, gamma)
        return GeometryBundle(geom, g, alg.inverse, alg.det, alg.volume_weight,
                              gamma, curv.riemann, curv.ricci, curv.scalar)

    if cache is None:
        return build()
    return cache.get_or_compute(array_key(geom, g), build)


# -- linearizations ----------------------------------------------------------
#
# First-order changes of the discrete quantities above when g moves along h
# (and φ along ϑ). They differentiate the stencil formulas themselves, so a
# central difference of the discrete quantity converges to them at O(ε²)
# with no discretization error.

def inverse_variation(inverse: np.ndarray, h: np.ndarray) -> np.ndarray:
    """δ(g^{-1}) = -g^{-1} h g^{-1}."""
    return -np.einsum('...ia,...ab,...bj->...ij', inverse, h, inverse)


def volume_variation(inverse: np.ndarray, h: np.ndarray) -> np.ndarray:
    """δ log √det g = ½ tr_g h."""
    return 0.5 * np.einsum('...ij,...ij->...', inverse, h)


def christoffel_variation(geom: GridGeometry, bundle: GeometryBundle, h: np.ndarray) -> np.ndarray:
    d_inv = inverse_variation(bundle.inverse, h)
    lower = _christoffel_lower(gradient(geom, bundle.g))
    return symmetrize(np.einsum('...kl,...lij->...kij', d_inv, lower)
                      + np.einsum('...kl,...lij->...kij', bundle.inverse, _christoffel_lower(gradient(geom, h))))


def curvature_variation(geom: GridGeometry, bundle: GeometryBundle, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(δRc, δR) of the discrete curvature along h."""
    inv, gamma = bundle.inverse, bundle.gamma
    d_inv = inverse_variation(inv, h)
    d_gamma = christoffel_variation(geom, bundle, h)
    d_up = (_riemann_linear(gradient(geom, d_gamma))
            + _riemann_quadratic(d_gamma, gamma) + _riemann_quadratic(gamma, d_gamma))
    d_riemann = (np.einsum('...ar,...rsmn->...asmn', h, _riemann_up(geom, gamma))
                 + np.einsum('...ar,...rsmn->...asmn', bundle.g, d_up))
    d_ricci = symmetrize(np.einsum('...kl,...kilj->...ij', d_inv, bundle.riemann)
                         + np.einsum('...kl,...kilj->...ij', inv, d_riemann))
    d_scalar = np.einsum('...ij,...ij->...', d_inv, bundle.ricci) + np.einsum('...ij,...ij->...', inv, d_ricci)
    return d_ricci, d_scalar


# -- norms and contractions ------------------------------------------------

def tensor_inner(inverse: np.ndarray, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """g^{ia} g^{jb} A_ij B_ab per node."""
    b = a if b is None else b
    return np.einsum('...ia,...jb,...ij,...ab->...', inverse, inverse, a, b, optimize=True)


def vector_norm2(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum('...ij,...i,...j->...', g, x, x)


def covector_norm2(inverse: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum('...ij,...i,...j->...', inverse, w, w)


def riemann_norm2(inverse: np.ndarray, riemann: np.ndarray) -> np.ndarray:
    return np.einsum('...ae,...bf,...cg,...dh,...abcd,...efgh->...',
                     inverse, inverse, inverse, inverse, riemann, riemann, optimize=True)


def covariant_derivative(geom: GridGeometry, gamma: np.ndarray, tensor: np.ndarray, rank: int) -> np.ndarray:
    """Levi-Civita derivative of an all-lower tensor; the new index comes first."""
    out = gradient(geom, tensor)
    slots = _SLOT_LETTERS[:rank]
    for s in range(rank):
        source = slots[:s] + 'p' + slots[s + 1:]
        out = out - np.einsum(f'...pa{slots[s]},...{source}->...a{slots}', gamma, tensor)
    return out


def rough_laplacian(geom: GridGeometry, bundle: GeometryBundle, t: np.ndarray) -> np.ndarray:
    first = covariant_derivative(geom, bundle.gamma, t, 2)
    second = covariant_derivative(geom, bundle.gamma, first, 3)
    return np.einsum('...ba,...baij->...ij', bundle.inverse, second)


def lichnerowicz_laplacian(geom: GridGeometry, g: np.ndarray, t: np.ndarray,
                           bundle: Optional[GeometryBundle] = None) -> np.ndarray:
    """Δ_L t_ij = Δt_ij + 2 R_i^p_j^q t_pq - R_i^p t_pj - R_j^p t_pi."""
    b = bundle if bundle is not None else compute_geometry(geom, g)
    return rough_laplacian(geom, b, t) + lichnerowicz_curvature_terms(b, t)


def lichnerowicz_curvature_terms(bundle: GeometryBundle, t: np.ndarray) -> np.ndarray:
    return lichnerowicz_terms(bundle.inverse, bundle.riemann, bundle.ricci, t)


def lichnerowicz_terms(inv: np.ndarray, riemann: np.ndarray, ricci: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Zeroth-order part of Δ_L; works on grid fields and on single-point tensors alike."""
    ric_mixed = np.einsum('...ia,...ap->...ip', ricci, inv)
    curv = 2 * np.einsum('...pa,...qb,...iajb,...pq->...ij', inv, inv, riemann, t, optimize=True)
    corr = (np.einsum('...ip,...pj->...ij', ric_mixed, t)
            + np.einsum('...jp,...pi->...ij', ric_mixed, t))
    return curv - corr


# -- scalar calculus -------------------------------------------------------

class ScalarCalculus(NamedTuple):
    grad: np.ndarray
    hessian: np.ndarray
    laplacian: np.ndarray


def scalar_calculus(geom: GridGeometry, g: np.ndarray, f: np.ndarray,
                    bundle: Optional[GeometryBundle] = None) -> ScalarCalculus:
    b = bundle if bundle is not None else compute_geometry(geom, g)
    grad = gradient(geom, f)
    hess = symmetrize(second_derivatives(geom, f) - np.einsum('...kij,...k->...ij', b.gamma, grad))
    lap = np.einsum('...ij,...ij->...', b.inverse, hess)
    return ScalarCalculus(grad, hess, lap)


def integrate(geom: GridGeometry, g: np.ndarray, field: np.ndarray,
              bundle: Optional[GeometryBundle] = None) -> float:
    weight = bundle.volume_weight if bundle is not None else metric_algebra(geom, g).volume_weight
    return float(np.sum(field * weight))


# -- map calculus ----------------------------------------------------------

class MapCalculus(NamedTuple):
    grad: np.ndarray            # [..., lam, i] = d_i phi^lam
    energy_density: np.ndarray  # |∇φ|²
    outer: np.ndarray           # (∇φ⊗∇φ)_ij
    hessian: np.ndarray         # [..., lam, i, j], tangential
    tension: np.ndarray         # [..., lam]


def check_map_constraint(phi: np.ndarray, target: TargetSpec, tolerance: float = CONSTRAINT_TOLERANCE) -> None:
    if phi.shape[-1] != target.embedding_dim:
        raise ConstraintViolationError(
            f"map has {phi.shape[-1]} components, target embeds in R^{target.embedding_dim}")
    if not target.is_sphere:
        return
    deviation = np.abs(np.linalg.norm(phi, axis=-1) - target.radius)
    idx = int(np.argmax(deviation))
    worst = float(deviation.flat[idx])
    if worst > tolerance:
        node = tuple(int(i) for i in np.unravel_index(idx, deviation.shape))
        raise ConstraintViolationError(
            f"map leaves the sphere of radius {target.radius} at node {node} by {worst:.3e}",
            node=node, violation=worst)


def map_calculus(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                 bundle: Optional[GeometryBundle] = None) -> MapCalculus:
    check_map_constraint(phi, target)
    b = bundle if bundle is not None else compute_geometry(geom, g)
    dphi = gradient(geom, phi)  # [..., i, lam]
    grad = np.swapaxes(dphi, -1, -2)
    outer = np.einsum('...li,...lj->...ij', grad, grad)
    energy = np.einsum('...ij,...ij->...', b.inverse, outer)
    raw = second_derivatives(geom, phi) - np.einsum('...kij,...kl->...ijl', b.gamma, dphi)
    hess = np.moveaxis(target.tangent_part(phi, raw), -1, geom.dim)
    hess = symmetrize(hess)
    tension = np.einsum('...ij,...lij->...l', b.inverse, hess)
    return MapCalculus(grad, energy, outer, hess, tension)


def energy_density_variation(geom: GridGeometry, bundle: GeometryBundle, maps: MapCalculus,
                             h: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """δ|∇φ|² along (h, ϑ)."""
    d_grad = np.swapaxes(gradient(geom, theta), -1, -2)
    d_outer = np.einsum('...li,...lj->...ij', maps.grad, d_grad)
    d_outer = d_outer + np.swapaxes(d_outer, -1, -2)
    return (np.einsum('...ij,...ij->...', inverse_variation(bundle.inverse, h), maps.outer)
            + np.einsum('...ij,...ij->...', bundle.inverse, d_outer))


def hessian_norm2(inverse: np.ndarray, hessian: np.ndarray) -> np.ndarray:
    return np.einsum('...ia,...jb,...lij,...lab->...', inverse, inverse, hessian, hessian, optimize=True)


def directional(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """∇_X φ = X^i d_i φ."""
    return np.einsum('...li,...i->...l', grad, x)


def target_curvature_term(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                          bundle: Optional[GeometryBundle] = None,
                          maps: Optional[MapCalculus] = None) -> np.ndarray:
    """Σ_ij <Rm^N(∇_iφ, ∇_jφ)∇_jφ, ∇_iφ>; for the round sphere (|∇φ|⁴ - |∇φ⊗∇φ|²)/ρ²."""
    if not target.is_sphere:
        return np.zeros(geom.shape)
    b = bundle if bundle is not None else compute_geometry(geom, g)
    mc = maps if maps is not None else map_calculus(geom, g, phi, target, b)
    return (mc.energy_density ** 2 - tensor_inner(b.inverse, mc.outer)) / target.radius ** 2


def s_fields(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, alpha: float, target: TargetSpec,
             bundle: Optional[GeometryBundle] = None,
             maps: Optional[MapCalculus] = None) -> Tuple[np.ndarray, np.ndarray]:
    if alpha < 0:
        raise ValueError(f"coupling must be non-negative, got {alpha}")
    b = bundle if bundle is not None else compute_geometry(geom, g)
    mc = maps if maps is not None else map_calculus(geom, g, phi, target, b)
    s_ij = b.ricci - alpha * mc.outer
    return s_ij, b.scalar - alpha * mc.energy_density


@dataclass(frozen=True)
class StateGeometry:
    """Metric bundle plus map calculus for one (g, φ) snapshot."""
    bundle: GeometryBundle
    maps: MapCalculus
    target_term: np.ndarray
    target: TargetSpec

    @property
    def inverse(self) -> np.ndarray:
        return self.bundle.inverse

    def s_fields(self, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        return (self.bundle.ricci - alpha * self.maps.outer,
                self.bundle.scalar - alpha * self.maps.energy_density)

    def hessian_norm2(self) -> np.ndarray:
        return hessian_norm2(self.bundle.inverse, self.maps.hessian)

    def riemann_norm(self) -> np.ndarray:
        return np.sqrt(np.maximum(riemann_norm2(self.bundle.inverse, self.bundle.riemann), 0.0))


def analyze_state(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, target: TargetSpec,
                  cache: Optional[LRUCache] = None) -> StateGeometry:
    b = compute_geometry(geom, g, cache)
    mc = map_calculus(geom, g, phi, target, b)
    term = target_curvature_term(geom, g, phi, target, b, mc)
    return StateGeometry(b, mc, term, target)
