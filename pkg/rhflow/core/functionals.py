"""
Energy and entropy functionals of the coupled flow and their minimizers.

    F(g, φ, f)    = ∫ (R + |∇f|² - α|∇φ|²) e^{-f} dV
    W(g, φ, f, τ) = ∫ (τ(R + |∇f|² - α|∇φ|²) + f - m) (4πτ)^{-m/2} e^{-f} dV

λ is the bottom of the spectrum of -4Δ + R - α|∇φ|², μ the infimum of W
over normalized f. Both minimizations run on a P1 finite-element
discretization of the Dirichlet energy on the periodic grid (two triangles
per cell, lumped mass); F and W themselves use the finite-difference
calculus of grid_tensor.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..utils.error_handler import (
    ConstraintViolationError, ConvergenceError, InsufficientSamplesError, NegativeDensityError,
)
from ..utils.metrics import MetricsManager
from .deturck import Trajectory, deturck_vector
from .grid_tensor import (
    GridGeometry, TargetSpec, compute_geometry, covector_norm2, curvature_variation, directional,
    energy_density_variation, gradient, inverse_variation, map_calculus, scalar_calculus, tensor_inner,
    volume_variation,
)
from .homogeneous import HomTrajectory, HomogeneousState, ModelKind, hom_geometry
from .reports import CheckResult, FunctionalReport, Verdict, verdict_for
from .trajectory import CouplingSchedule, time_derivative

logger = logging.getLogger(__name__)

LAMBDA_TOLERANCE = 1e-8
MU_TOLERANCE = 1e-6
MONOTONICITY_TOLERANCE = 1e-6
DERIVATIVE_RTOL = 1e-4
VARIATION_STEPS = (1e-3, 1e-4, 1e-5)
TANGENCY_TOLERANCE = 1e-10
DUALITY_FACTOR = 10.0


def entropy_constant(m: int) -> float:
    """(m/2) log 4π + m."""
    return 0.5 * m * math.log(4 * math.pi) + m


# -- evaluation ------------------------------------------------------------------

def _f_terms(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
             target: TargetSpec):
    bundle = compute_geometry(geom, g)
    maps = map_calculus(geom, g, phi, target, bundle)
    grad_f = gradient(geom, f)
    integrand = bundle.scalar + covector_norm2(bundle.inverse, grad_f) - alpha * maps.energy_density
    return bundle, integrand


def energy_F(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
             target: TargetSpec) -> float:
    bundle, integrand = _f_terms(geom, g, phi, f, alpha, target)
    return float(np.sum(integrand * np.exp(-f) * bundle.volume_weight))


def entropy_W(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, tau: float, alpha: float,
              target: TargetSpec) -> float:
    if not tau > 0:
        raise ValueError(f"τ must be positive, got {tau}")
    m = geom.dim
    bundle, integrand = _f_terms(geom, g, phi, f, alpha, target)
    weight = (4 * math.pi * tau) ** (-m / 2) * np.exp(-f) * bundle.volume_weight
    return float(np.sum((tau * integrand + f - m) * weight))


def normalize_potential(geom: GridGeometry, g: np.ndarray, f: np.ndarray, tau: Optional[float] = None) -> np.ndarray:
    """Shift f so that ∫e^{-f}dV = 1, or ∫(4πτ)^{-m/2}e^{-f}dV = 1 when τ is given."""
    weight = compute_geometry(geom, g).volume_weight
    mass = float(np.sum(np.exp(-f) * weight))
    if tau is not None:
        mass *= (4 * math.pi * tau) ** (-geom.dim / 2)
    return f + math.log(mass)


def hom_energy_F(state: HomogeneousState, model: ModelKind, f: Optional[float] = None) -> float:
    """F for spatially constant f; the default f = log vol gives F = S."""
    geo = hom_geometry(state, model)
    f = math.log(geo.volume) if f is None else f
    return geo.s * geo.volume * math.exp(-f)


def hom_w_potential(state: HomogeneousState, model: ModelKind, tau: float) -> float:
    geo = hom_geometry(state, model)
    return math.log(geo.volume * (4 * math.pi * tau) ** (-model.dim / 2))


def hom_entropy_W(state: HomogeneousState, model: ModelKind, tau: float, f: Optional[float] = None) -> float:
    geo = hom_geometry(state, model)
    f = hom_w_potential(state, model, tau) if f is None else f
    mass = geo.volume * (4 * math.pi * tau) ** (-model.dim / 2) * math.exp(-f)
    return (tau * geo.s + f - model.dim) * mass


# -- first variations --------------------------------------------------------------

@dataclass
class VariationCheck:
    analytic: float
    numeric: Dict[float, float]
    passed: bool
    best_error: float
    integrated: Optional[float] = None

    @property
    def discretization_gap(self) -> Optional[float]:
        """Distance between the discrete variation and the integrated-by-parts formula."""
        return None if self.integrated is None else abs(self.analytic - self.integrated)

    def to_dict(self) -> Dict[str, object]:
        return {'analytic': self.analytic, 'numeric': {str(k): v for k, v in self.numeric.items()},
                'passed': self.passed, 'best_error': self.best_error, 'integrated': self.integrated,
                'discretization_gap': self.discretization_gap}


def _check_tangent(phi: np.ndarray, theta: np.ndarray, target: TargetSpec) -> None:
    if not target.is_sphere:
        return
    normal = np.abs(np.sum(phi * theta, axis=-1))
    bound = TANGENCY_TOLERANCE * target.radius * np.linalg.norm(theta, axis=-1) + 1e-300
    if np.any(normal > bound):
        idx = int(np.argmax(normal - bound))
        node = tuple(int(i) for i in np.unravel_index(idx, normal.shape))
        raise ConstraintViolationError(f"map variation is not tangent to the target at node {node}",
                                       node=node, violation=float(normal.flat[idx]))


def tangent_projection(phi: np.ndarray, eta: np.ndarray, target: TargetSpec) -> np.ndarray:
    return target.tangent_part(phi, eta)


class _Linearized(NamedTuple):
    weight: np.ndarray      # e^{-f} dV per node
    integrand: np.ndarray   # R + |∇f|² - α|∇φ|²
    d_integrand: np.ndarray
    d_log_weight: np.ndarray


def _linearize(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
               target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray) -> _Linearized:
    bundle = compute_geometry(geom, g)
    maps = map_calculus(geom, g, phi, target, bundle)
    inv = bundle.inverse
    grad_f = gradient(geom, f)
    _, d_scalar = curvature_variation(geom, bundle, h)
    d_grad_f2 = (covector_norm2(inverse_variation(inv, h), grad_f)
                 + 2 * np.einsum('...ij,...i,...j->...', inv, grad_f, gradient(geom, ell)))
    d_energy = energy_density_variation(geom, bundle, maps, h, theta)
    return _Linearized(
        weight=np.exp(-f) * bundle.volume_weight,
        integrand=bundle.scalar + covector_norm2(inv, grad_f) - alpha * maps.energy_density,
        d_integrand=d_scalar + d_grad_f2 - alpha * d_energy,
        d_log_weight=volume_variation(inv, h) - ell,
    )


def variation_F(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
                target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray) -> float:
    """Exact first-order change of the discrete F along (h, ϑ, ℓ).

    For a tangent ϑ the projection back onto the target does not enter at
    first order, so δφ = ϑ.
    """
    lin = _linearize(geom, g, phi, f, alpha, target, h, theta, ell)
    return float(np.sum((lin.d_integrand + lin.integrand * lin.d_log_weight) * lin.weight))


def variation_W(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, tau: float, alpha: float,
                target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray, sigma: float) -> float:
    """Exact first-order change of the discrete W along (h, ϑ, ℓ, σ = δτ)."""
    m = geom.dim
    lin = _linearize(geom, g, phi, f, alpha, target, h, theta, ell)
    value = tau * lin.integrand + f - m
    d_value = sigma * lin.integrand + tau * lin.d_integrand + ell
    d_log = lin.d_log_weight - m * sigma / (2 * tau)
    weight = (4 * math.pi * tau) ** (-m / 2) * lin.weight
    return float(np.sum((d_value + value * d_log) * weight))


def integrated_variation_F(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
                           target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray) -> float:
    """∫[-h·(Rc + Hess f - α∇φ⊗∇φ) + (½tr h - ℓ)(2Δf - |∇f|² + R - α|∇φ|²)
        + 2α<τφ - ∇_{∇f}φ, ϑ>] e^{-f} dV, the variation after integration by parts.

    Agrees with `variation_F` up to the O(h⁴) error of the stencils.
    """
    bundle = compute_geometry(geom, g)
    maps = map_calculus(geom, g, phi, target, bundle)
    sc = scalar_calculus(geom, g, f, bundle)
    inv = bundle.inverse
    grad_f_up = np.einsum('...ij,...j->...i', inv, sc.grad)
    tensor = bundle.ricci + sc.hessian - alpha * maps.outer
    trace_h = np.einsum('...ij,...ij->...', inv, h)
    scalar = 2 * sc.laplacian - covector_norm2(inv, sc.grad) + bundle.scalar - alpha * maps.energy_density
    drift = maps.tension - directional(maps.grad, grad_f_up)
    integrand = (-tensor_inner(inv, h, tensor) + (0.5 * trace_h - ell) * scalar
                 + 2 * alpha * np.sum(drift * theta, axis=-1))
    return float(np.sum(integrand * np.exp(-f) * bundle.volume_weight))


def integrated_variation_W(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, tau: float,
                           alpha: float, target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray,
                           sigma: float) -> float:
    """Integrated-by-parts variation of W along (h, ϑ, ℓ, σ)."""
    m = geom.dim
    bundle = compute_geometry(geom, g)
    maps = map_calculus(geom, g, phi, target, bundle)
    sc = scalar_calculus(geom, g, f, bundle)
    inv = bundle.inverse
    grad_f_up = np.einsum('...ij,...j->...i', inv, sc.grad)
    tensor = bundle.ricci + sc.hessian - alpha * maps.outer - g / (2 * tau)
    trace_h = np.einsum('...ij,...ij->...', inv, h)
    scalar = (2 * sc.laplacian - covector_norm2(inv, sc.grad) + bundle.scalar - alpha * maps.energy_density
              + (f - m - 1) / tau)
    drift = maps.tension - directional(maps.grad, grad_f_up)
    integrand = (tensor_inner(inv, -tau * h + sigma * g, tensor)
                 + tau * (0.5 * trace_h - ell - m * sigma / (2 * tau)) * scalar
                 + 2 * tau * alpha * np.sum(drift * theta, axis=-1))
    weight = (4 * math.pi * tau) ** (-m / 2) * np.exp(-f) * bundle.volume_weight
    return float(np.sum(integrand * weight))


def _compare(analytic: float, evaluate, steps: Sequence[float]) -> VariationCheck:
    numeric = {}
    errors = []
    passed = False
    for eps in steps:
        value = (evaluate(eps) - evaluate(-eps)) / (2 * eps)
        numeric[eps] = value
        err = abs(value - analytic)
        errors.append(err)
        if err <= max(1e-6, 10 * eps ** 2):
            passed = True
    return VariationCheck(analytic, numeric, passed, min(errors))


def first_variation_check(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
                          target: TargetSpec, h: np.ndarray, theta: np.ndarray, ell: np.ndarray,
                          tau: Optional[float] = None, sigma: float = 0.0,
                          steps: Sequence[float] = VARIATION_STEPS) -> VariationCheck:
    """Analytic first variation against central differences of the functional.

    Without τ the functional is F; with τ it is W and σ perturbs τ. The
    integrated-by-parts value is recorded next to it.
    """
    _check_tangent(phi, theta, target)

    if tau is None:
        analytic = variation_F(geom, g, phi, f, alpha, target, h, theta, ell)
        integrated = integrated_variation_F(geom, g, phi, f, alpha, target, h, theta, ell)

        def evaluate(eps: float) -> float:
            return energy_F(geom, g + eps * h, target.project(phi + eps * theta), f + eps * ell, alpha, target)
    else:
        analytic = variation_W(geom, g, phi, f, tau, alpha, target, h, theta, ell, sigma)
        integrated = integrated_variation_W(geom, g, phi, f, tau, alpha, target, h, theta, ell, sigma)

        def evaluate(eps: float) -> float:
            return entropy_W(geom, g + eps * h, target.project(phi + eps * theta), f + eps * ell,
                             tau + eps * sigma, alpha, target)

    check = _compare(analytic, evaluate, steps)
    check.integrated = integrated
    logger.debug(f"First variation: analytic={analytic:.10g}, best error={check.best_error:.3e}, "
                 f"integrated gap={check.discretization_gap:.3e}")
    return check

@dataclass
class GradientFlowRates:
    g_dot: np.ndarray
    phi_dot: np.ndarray
    f_dot: np.ndarray
    dF: float


def gradient_flow_rhs(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, f: np.ndarray, alpha: float,
                      target: TargetSpec) -> GradientFlowRates:
    """Measure-preserving gradient system of F and the resulting dF/dt ≥ 0."""
    bundle = compute_geometry(geom, g)
    maps = map_calculus(geom, g, phi, target, bundle)
    sc = scalar_calculus(geom, g, f, bundle)
    inv = bundle.inverse
    grad_f_up = np.einsum('...ij,...j->...i', inv, sc.grad)
    tensor = bundle.ricci + sc.hessian - alpha * maps.outer
    drift = maps.tension - directional(maps.grad, grad_f_up)
    f_dot = -bundle.scalar - sc.laplacian + alpha * maps.energy_density
    density = 2 * tensor_inner(inv, tensor) + 2 * alpha * np.sum(drift ** 2, axis=-1)
    dF = float(np.sum(density * np.exp(-f) * bundle.volume_weight))
    return GradientFlowRates(-2 * tensor, drift, f_dot, dF)


# -- discrete Schrödinger operator ---------------------------------------------------

def _node_index(geom: GridGeometry) -> np.ndarray:
    return np.arange(geom.node_count).reshape(geom.shape)


def stiffness_matrix(geom: GridGeometry, g: np.ndarray) -> sp.csr_matrix:
    """P1 stiffness matrix of ∫ g^{ab} ∂a u ∂b v dV on the periodic grid."""
    bundle = compute_geometry(geom, g)
    coef = np.sqrt(bundle.det)[..., None, None] * bundle.inverse
    idx = _node_index(geom)
    h = geom.spacing
    rows, cols, data = [], [], []
    if geom.dim == 1:
        right = np.roll(idx, -1)
        c = 0.5 * (coef[..., 0, 0] + np.roll(coef[..., 0, 0], -1)) / h
        for a, b, s in ((idx, idx, 1.0), (right, right, 1.0), (idx, right, -1.0), (right, idx, -1.0)):
            rows.append(a.ravel())
            cols.append(b.ravel())
            data.append((s * c).ravel())
    else:
        shifted = {
            (0, 0): idx, (1, 0): np.roll(idx, -1, 0), (0, 1): np.roll(idx, -1, 1),
            (1, 1): np.roll(np.roll(idx, -1, 0), -1, 1),
        }
        coef_at = {
            (0, 0): coef, (1, 0): np.roll(coef, -1, 0), (0, 1): np.roll(coef, -1, 1),
            (1, 1): np.roll(np.roll(coef, -1, 0), -1, 1),
        }
        elements = (
            (((0, 0), (1, 0), (0, 1)), np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])),
            (((1, 1), (0, 1), (1, 0)), np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])),
        )
        area = 0.5 * h * h
        for verts, grads in elements:
            grads = grads / h
            c = sum(coef_at[v] for v in verts) / 3.0
            for a in range(3):
                for b in range(3):
                    entry = area * np.einsum('...ij,i,j->...', c, grads[a], grads[b])
                    rows.append(shifted[verts[a]].ravel())
                    cols.append(shifted[verts[b]].ravel())
                    data.append(entry.ravel())
    n = geom.node_count
    matrix = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return matrix.tocsr()


def derivative_matrix(geom: GridGeometry, axis: int) -> sp.csr_matrix:
    """Sparse form of grid_tensor.partial along `axis`."""
    idx = _node_index(geom)
    h = geom.spacing
    rows, cols, data = [], [], []
    for shift, weight in ((-2, -1.0), (-1, 8.0), (1, -8.0), (2, 1.0)):
        rows.append(idx.ravel())
        cols.append(np.roll(idx, shift, axis).ravel())
        data.append(np.full(geom.node_count, weight / (12 * h)))
    n = geom.node_count
    return sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()


@dataclass
class SchrodingerOperator:
    """-4Δ + P as the pencil (4K + diag(wP), diag(w))."""
    geom: GridGeometry
    stiffness: sp.csr_matrix
    weights: np.ndarray
    potential: np.ndarray

    @classmethod
    def build(cls, geom: GridGeometry, g: np.ndarray, phi: np.ndarray, alpha: float,
              target: TargetSpec) -> 'SchrodingerOperator':
        bundle = compute_geometry(geom, g)
        maps = map_calculus(geom, g, phi, target, bundle)
        potential = bundle.scalar - alpha * maps.energy_density
        return cls(geom, stiffness_matrix(geom, g), bundle.volume_weight.ravel(), potential.ravel())

    @property
    def volume(self) -> float:
        return float(np.sum(self.weights))

    def matrix(self, shift: float = 0.0) -> sp.csr_matrix:
        return (4 * self.stiffness + sp.diags(self.weights * (self.potential - shift))).tocsr()

    def rayleigh(self, v: np.ndarray) -> float:
        return float((v @ (self.matrix() @ v)) / np.sum(self.weights * v * v))

    def residual(self, v: np.ndarray, value: float) -> float:
        r = self.matrix() @ v - value * self.weights * v
        return float(np.sqrt(np.sum(r * r / self.weights)))

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.matrix().toarray(), np.diag(self.weights)


@dataclass
class EigenResult:
    value: float
    bar: float
    vector: np.ndarray
    residual: float
    iterations: int
    volume: float


def ground_state(op: SchrodingerOperator, tol: float = LAMBDA_TOLERANCE, max_iter: int = 500,
                 x0: Optional[np.ndarray] = None, metrics: Optional[MetricsManager] = None) -> EigenResult:
    """Inverse iteration with shift min P - 1; CG inner solves with a Jacobi preconditioner."""
    shift = float(np.min(op.potential)) - 1.0
    matrix = op.matrix(shift)
    jacobi = sp.diags(1.0 / matrix.diagonal())
    w = op.weights
    v = np.ones_like(w) if x0 is None else np.abs(np.asarray(x0, dtype=float).ravel())
    v = v / math.sqrt(np.sum(w * v * v))
    x = v
    value, res = op.rayleigh(v), math.inf
    for it in range(1, max_iter + 1):
        x, info = spla.cg(matrix, w * v, x0=x, rtol=1e-13, atol=0.0, maxiter=10 * len(w), M=jacobi)
        if info < 0:
            raise ConvergenceError("conjugate gradients broke down", res, v)
        v = x / math.sqrt(np.sum(w * x * x))
        value = op.rayleigh(v)
        res = op.residual(v, value)
        if res <= tol:
            break
    else:
        raise ConvergenceError(f"inverse iteration did not converge in {max_iter} iterations", res, v)
    if metrics is not None:
        metrics.track_solver('lambda', it)
    v = v * np.sign(np.sum(v))
    m = op.geom.dim
    return EigenResult(value, value * op.volume ** (2.0 / m), v.reshape(op.geom.shape), res, it, op.volume)


def lambda_alpha(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, alpha: float, target: TargetSpec,
                 tol: float = LAMBDA_TOLERANCE, max_iter: int = 500,
                 metrics: Optional[MetricsManager] = None) -> EigenResult:
    """Smallest eigenvalue of -4Δ + R - α|∇φ|² with its positive, L²-normalized eigenfunction."""
    op = SchrodingerOperator.build(geom, g, phi, alpha, target)
    result = ground_state(op, tol, max_iter, metrics=metrics)
    logger.debug(f"λ={result.value:.12g} (λ̄={result.bar:.12g}) after {result.iterations} iterations")
    return result


def lambda_upper_bound_check(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, alpha: float,
                             target: TargetSpec, tolerance: float = 1e-8) -> CheckResult:
    """λ ≤ vol⁻¹∫S dV, the Rayleigh quotient of the constant function."""
    op = SchrodingerOperator.build(geom, g, phi, alpha, target)
    result = ground_state(op)
    mean_s = float(np.sum(op.weights * op.potential) / op.volume)
    margin = mean_s - result.value
    return CheckResult('lambda_upper_bound', verdict_for(max(0.0, -margin), tolerance),
                       residual=max(0.0, -margin), tolerance=tolerance, margin=margin,
                       details={'lambda': result.value, 'mean_S': mean_s})


@dataclass
class EntropyResult:
    value: float
    vector: np.ndarray
    residual: float
    iterations: int
    tau: float
    converged: bool
    seed_values: List[float] = field(default_factory=list)


class _MuObjective:
    """E(v) = 4vᵀKv + Σw(P - c)v² - 2Σw v² log v on {Σw v² = 1}, evaluated at τ = 1."""

    FLOOR = 1e-14

    def __init__(self, op: SchrodingerOperator):
        self.op = op
        self.c = entropy_constant(op.geom.dim)
        self.w = op.weights
        self.k = op.stiffness
        shifted = 8 * self.k + 2 * sp.diags(self.w * (op.potential - np.min(op.potential) + 1.0))
        self.precond = spla.splu(shifted.tocsc())

    def normalize(self, v: np.ndarray) -> np.ndarray:
        v = np.maximum(v, self.FLOOR)
        return v / math.sqrt(np.sum(self.w * v * v))

    def energy(self, v: np.ndarray) -> float:
        p = self.op.potential
        return float(4 * v @ (self.k @ v) + np.sum(self.w * (p - self.c) * v * v)
                     - 2 * np.sum(self.w * v * v * np.log(v)))

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return 8 * (self.k @ v) + 2 * self.w * (self.op.potential - self.c - 1 - 2 * np.log(v)) * v

    def residual(self, v: np.ndarray, value: float) -> float:
        lv = 4 * (self.k @ v) / self.w + (self.op.potential - self.c - 2 * np.log(v)) * v
        r = lv - value * v
        return float(np.sqrt(np.sum(self.w * r * r)))

    def minimize(self, v0: np.ndarray, tol: float, max_iter: int) -> EntropyResult:
        v = self.normalize(v0)
        value = self.energy(v)
        res = self.residual(v, value)
        it = 0
        for it in range(1, max_iter + 1):
            if res <= tol:
                break
            grad = self.gradient(v)
            z = self.precond.solve(grad)
            y = self.precond.solve(self.w * v)
            nu = float(v @ (self.w * z)) / float(v @ (self.w * y))
            direction = -(z - nu * y)
            slope = float(grad @ direction)
            if slope >= 0:
                break
            s = 1.0
            while True:
                cand = self.normalize(v + s * direction)
                cand_value = self.energy(cand)
                if cand_value <= value + 1e-4 * s * slope or s < 1e-12:
                    break
                s *= 0.5
            if s < 1e-12:
                break
            v, value = cand, cand_value
            res = self.residual(v, value)
        return EntropyResult(value, v, res, it, 1.0, res <= tol)


def mu_alpha(geom: GridGeometry, g: np.ndarray, phi: np.ndarray, tau: float, alpha: float, target: TargetSpec,
             tol: float = MU_TOLERANCE, max_iter: int = 2000, starts: int = 5, seed: int = 0,
             metrics: Optional[MetricsManager] = None) -> EntropyResult:
    """μ(g, φ, τ) = μ(g/τ, φ, 1), minimized from the λ ground state and random positive perturbations."""
    if not tau > 0:
        raise ValueError(f"τ must be positive, got {tau}")
    op = SchrodingerOperator.build(geom, g / tau, phi, alpha, target)
    objective = _MuObjective(op)
    base = ground_state(op).vector.ravel()
    rng = np.random.default_rng(seed)
    seeds = [base] + [base * np.exp(0.1 * rng.standard_normal(base.shape)) for _ in range(max(0, starts - 1))]

    results = [objective.minimize(s, tol, max_iter) for s in seeds]
    best = min(results, key=lambda r: (not r.converged, r.value))
    best.tau = tau
    best.vector = best.vector.reshape(geom.shape)
    best.seed_values = [r.value for r in results]
    if metrics is not None:
        for r in results:
            metrics.track_solver('mu', r.iterations)
    if not best.converged:
        raise ConvergenceError("μ minimization did not reach its stationarity tolerance", best.residual, best)
    logger.debug(f"μ(τ={tau})={best.value:.12g}, residual {best.residual:.2e}")
    return best


# -- adjoint heat equation ------------------------------------------------------------

@dataclass
class AdjointSolution:
    """Solution of □*u = 0 backwards from the final sample; one entry per sample time.

    `density` holds the node masses ρ = u·dV (a scalar for homogeneous runs)
    and `u` the pointwise values.
    """
    times: np.ndarray
    density: List[np.ndarray]
    u: List[np.ndarray]
    masses: np.ndarray
    substeps: int

    def potential(self, i: int, tau: Optional[float] = None, m: int = 2) -> np.ndarray:
        """f at sample i: u = e^{-f}, or u = (4πτ)^{-m/2}e^{-f} when τ is given."""
        f = -np.log(self.u[i])
        if tau is not None:
            f = f - 0.5 * m * math.log(4 * math.pi * tau)
        return f


def _adjoint_operator(state) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Generator of ∂s ρ = -K(ρ/w) - Σ D_a(V^a ρ) in backward time s = T - t."""
    geom = state.geom
    bundle = compute_geometry(geom, state.g)
    stiff = stiffness_matrix(geom, state.g)
    v = deturck_vector(geom, state.g, inverse=bundle.inverse, gamma=bundle.gamma)
    w = bundle.volume_weight.ravel()
    advect = sum(derivative_matrix(geom, a) @ sp.diags(v[..., a].ravel()) for a in range(geom.dim))
    backward = (-stiff @ sp.diags(1.0 / w) - advect).tocsr()
    return backward, w


def adjoint_heat_solve(traj: Union[Trajectory, HomTrajectory], terminal: Optional[np.ndarray] = None,
                       substeps: int = 1, max_refinements: int = 6) -> AdjointSolution:
    """Integrate the conjugate heat equation backwards over the trajectory samples.

    Grid runs use Crank-Nicolson on the mass density ρ = u·√det·h^m with
    coefficients averaged over each sample interval, which conserves Σρ
    exactly. Homogeneous runs keep u spatially constant with u·vol fixed.
    """
    times = traj.times
    if len(times) < 2:
        raise InsufficientSamplesError("adjoint heat solve needs at least two samples")

    if isinstance(traj, HomTrajectory):
        vols = np.array([hom_geometry(s, traj.model).volume for s in traj.samples])
        u_end = 1.0 / vols[-1] if terminal is None else float(terminal)
        mass = u_end * vols[-1]
        density = [np.array(mass) for _ in vols]
        u_values = [np.array(mass / v) for v in vols]
        return AdjointSolution(times, density, u_values, np.full(len(times), mass), 1)

    ops = [_adjoint_operator(s) for s in traj.samples]
    w_end = ops[-1][1]
    if terminal is None:
        rho = w_end / np.sum(w_end)
    else:
        u = np.asarray(terminal, dtype=float).ravel()
        if np.any(u <= 0):
            raise NegativeDensityError("terminal density must be positive")
        rho = u * w_end
        rho = rho / np.sum(rho)

    n = len(rho)
    identity = sp.identity(n, format='csc')
    density = [None] * len(times)
    density[-1] = rho.reshape(traj.geom.shape)
    for i in range(len(times) - 1, 0, -1):
        ds_total = times[i] - times[i - 1]
        op = 0.5 * (ops[i][0] + ops[i - 1][0])
        k = substeps
        for attempt in range(max_refinements + 1):
            ds = ds_total / k
            lhs = spla.splu((identity - 0.5 * ds * op).tocsc())
            rhs_op = (identity + 0.5 * ds * op).tocsr()
            trial = rho.copy()
            for _ in range(k):
                trial = lhs.solve(rhs_op @ trial)
            if np.all(trial > 0):
                break
            logger.warning(f"Adjoint density went negative on [{times[i - 1]:.4g}, {times[i]:.4g}]; "
                           f"refining to {2 * k} substeps")
            k *= 2
        else:
            raise NegativeDensityError(
                f"adjoint density negative on [{times[i - 1]}, {times[i]}] after {max_refinements} refinements")
        rho = trial
        density[i - 1] = rho.reshape(traj.geom.shape)
    masses = np.array([float(np.sum(d)) for d in density])
    u_values = [d / w.reshape(traj.geom.shape) for d, (_, w) in zip(density, ops)]
    return AdjointSolution(times, density, u_values, masses, substeps)


def duality_test_function(geom: GridGeometry) -> np.ndarray:
    """A fixed smooth periodic v for the duality check."""
    coords = geom.coordinates()
    return np.cos(coords[0]) + 0.5 * np.sin(sum(coords))


def adjoint_duality_residual(traj: Trajectory, solution: AdjointSolution, test_function: np.ndarray) -> float:
    """Largest gap between d/dt ∫v u dV and ∫(□v - ∇_V v) u dV for a time-independent v."""
    times = solution.times
    if len(times) < 3:
        raise InsufficientSamplesError("duality check needs at least three samples")
    v = np.asarray(test_function, dtype=float).ravel()
    pairing = np.array([float(v @ d.ravel()) for d in solution.density])
    measured = time_derivative(pairing, times, order=2)
    worst = 0.0
    scale = max(1.0, float(np.max(np.abs(pairing))))
    for i in range(1, len(times) - 1):
        backward, _ = _adjoint_operator(traj.samples[i])
        # forward-time derivative is -(backward operator)
        predicted = -float(v @ (backward @ solution.density[i].ravel()))
        worst = max(worst, abs(measured[i] - predicted) / scale)
    return worst


# -- monotonicity ---------------------------------------------------------------------

def _monotone_check(name: str, times: Sequence[float], values: Sequence[float], tolerance: float) -> CheckResult:
    values = np.asarray(values, dtype=float)
    drops = values[:-1] - values[1:]
    k = int(np.argmax(drops)) if len(drops) else 0
    violation = float(max(0.0, drops[k])) if len(drops) else 0.0
    verdict = verdict_for(violation, tolerance)
    if verdict != Verdict.PASS:
        logger.warning(f"{name} decreased by {violation:.3e} on [{times[k]:.6g}, {times[k + 1]:.6g}]")
    return CheckResult(f"{name}_non_decreasing", verdict, residual=violation, tolerance=tolerance,
                       details={'interval': [float(times[k]), float(times[k + 1])] if len(drops) else []})


def _derivative_check(name: str, times: np.ndarray, values: np.ndarray, analytic: np.ndarray,
                      rtol: float = DERIVATIVE_RTOL, atol: float = 1e-8) -> Tuple[CheckResult, np.ndarray]:
    numeric = time_derivative(values, times)
    inner = slice(2, len(times) - 2) if len(times) >= 5 else slice(1, len(times) - 1)
    excess = np.abs(numeric[inner] - analytic[inner]) - rtol * np.abs(analytic[inner])
    violation = float(max(0.0, np.max(excess))) if excess.size else 0.0
    return (CheckResult(f"d{name}_dt_matches_formula", verdict_for(violation, atol), residual=violation,
                        tolerance=atol, details={'rtol': rtol}), numeric)


def _hom_series(traj: HomTrajectory, tau_horizon: Optional[float], tolerance: float) -> FunctionalReport:
    model = traj.model
    m = model.dim
    times = traj.times
    if len(times) < 3:
        raise InsufficientSamplesError("monotonicity series needs at least three samples")
    if tau_horizon is None:
        tau_horizon = traj.singularity.t if traj.singularity is not None else times[-1] + 1.0
    report = FunctionalReport(times=list(times))
    F, dF, W, dW, lam, lam_bar = [], [], [], [], [], []
    for s in traj.samples:
        geo = hom_geometry(s, model)
        tau = tau_horizon - s.t
        a_dot = 0.0 if model.flow == 'ricci' else s.alpha_dot
        F.append(hom_energy_F(s, model))
        dF.append(2 * geo.s_norm2 - a_dot * geo.energy)
        W.append(hom_entropy_W(s, model, tau))
        shifted = sum(2 * (e - 1 / (2 * tau)) ** 2 for e in geo.s_eigs)
        dW.append(2 * tau * shifted - tau * a_dot * geo.energy)
        lam.append(geo.s)
        lam_bar.append(geo.s * geo.volume ** (2.0 / m))
    F, dF, W, dW = map(np.array, (F, dF, W, dW))
    report.values = {'F': list(F), 'W': list(W), 'lambda': lam, 'lambda_bar': lam_bar}
    if model.normalized:
        # the derivative formulas hold for the unnormalized flow; rescaled runs only report values
        return report
    f_check, f_num = _derivative_check('F', times, F, dF)
    w_check, w_num = _derivative_check('W', times, W, dW)
    report.derivatives = {'F': {'numeric': list(f_num), 'analytic': list(dF)},
                          'W': {'numeric': list(w_num), 'analytic': list(dW)}}
    for check in (f_check, w_check, _monotone_check('F', times, F, tolerance),
                  _monotone_check('W', times, W, tolerance), _monotone_check('lambda', times, lam, tolerance)):
        report.checks.add(check)
    report.checks['F_non_decreasing'].details['tau_horizon'] = tau_horizon
    return report


def _grid_sample(state, alpha: float, tau: float, seed: int, metrics: Optional[MetricsManager]):
    lam = lambda_alpha(state.geom, state.g, state.phi, alpha, state.target, metrics=metrics)
    mu = mu_alpha(state.geom, state.g, state.phi, tau, alpha, state.target, seed=seed, metrics=metrics)
    return lam, mu


def _grid_series(traj: Trajectory, schedule: CouplingSchedule, tau_horizon: Optional[float], tolerance: float,
                 max_samples: int, threads: int, adjoint: bool, seed: int,
                 metrics: Optional[MetricsManager]) -> FunctionalReport:
    times_all = traj.times
    if len(times_all) < 3:
        raise InsufficientSamplesError("monotonicity series needs at least three samples")
    picks = np.unique(np.linspace(0, len(times_all) - 1, min(len(times_all), max_samples)).astype(int))
    states = [traj.samples[i] for i in picks]
    times = [s.t for s in states]
    if tau_horizon is None:
        tau_horizon = times_all[-1] + 1.0
    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_grid_sample, s, schedule(s.t), tau_horizon - s.t, seed, metrics) for s in states]
        solved = [fut.result() for fut in futures]
    if metrics is not None:
        metrics.track_phase('functionals', time.perf_counter() - started)

    report = FunctionalReport(times=times)
    report.values = {
        'lambda': [lam.value for lam, _ in solved],
        'lambda_bar': [lam.bar for lam, _ in solved],
        'mu': [mu.value for _, mu in solved],
        'tau': [tau_horizon - t for t in times],
    }
    report.checks.add(_monotone_check('lambda', times, report.values['lambda'], tolerance))
    report.checks.add(_monotone_check('mu', times, report.values['mu'], tolerance))
    if all(v <= 0 for v in report.values['lambda']):
        report.checks.add(_monotone_check('lambda_bar', times, report.values['lambda_bar'], tolerance))

    if adjoint:
        solution = adjoint_heat_solve(traj)
        f_values, w_values = [], []
        for i, state in enumerate(traj.samples):
            alpha = schedule(state.t)
            tau = tau_horizon - state.t
            f = solution.potential(i)
            f_values.append(energy_F(state.geom, state.g, state.phi, f, alpha, state.target))
            fw = solution.potential(i, tau, state.geom.dim)
            w_values.append(entropy_W(state.geom, state.g, state.phi, fw, tau, alpha, state.target))
        report.values['F'] = f_values
        report.values['W'] = w_values
        report.values['adjoint_mass'] = list(solution.masses)
        report.values['adjoint_times'] = list(times_all)
        report.checks.add(_monotone_check('F', list(times_all), f_values, tolerance))
        report.checks.add(_monotone_check('W', list(times_all), w_values, tolerance))
        mass_error = float(np.max(np.abs(solution.masses - 1.0)))
        report.checks.add(CheckResult('adjoint_mass_conserved', verdict_for(mass_error, 1e-6),
                                      residual=mass_error, tolerance=1e-6))
        duality = adjoint_duality_residual(traj, solution, duality_test_function(traj.geom))
        dt_sample = float(np.max(np.diff(times_all)))
        duality_tol = DUALITY_FACTOR * dt_sample ** 2
        report.checks.add(CheckResult('adjoint_duality', verdict_for(duality, duality_tol), residual=duality,
                                      tolerance=duality_tol, details={'sample_dt': dt_sample}))
    return report


def monotonicity_series(traj: Union[Trajectory, HomTrajectory], schedule: Optional[CouplingSchedule] = None,
                        tau_horizon: Optional[float] = None, tolerance: float = MONOTONICITY_TOLERANCE,
                        max_samples: int = 10, threads: int = 1, adjoint: bool = False, seed: int = 0,
                        metrics: Optional[MetricsManager] = None) -> FunctionalReport:
    """Functional values along a trajectory with derivative and monotonicity verdicts.

    τ at sample time t is tau_horizon - t.
    """
    if isinstance(traj, HomTrajectory):
        report = _hom_series(traj, tau_horizon, tolerance)
        schedule = schedule if schedule is not None else traj.schedule
    else:
        schedule = schedule if schedule is not None else traj.schedule
        report = _grid_series(traj, schedule, tau_horizon, tolerance, max_samples, threads, adjoint, seed, metrics)
    if schedule is not None and not schedule.is_non_increasing:
        logger.warning("Coupling schedule increases somewhere; monotonicity verdicts are informational only")
        for check in report.checks.checks:
            check.details['schedule_non_increasing'] = False
            if check.name.endswith('_non_decreasing'):
                check.details['informational'] = True
                if check.verdict == Verdict.FAIL:
                    check.verdict = Verdict.WARN
    logger.info(f"Functional series over {len(report.times)} samples: "
                f"{'all checks pass' if report.ok else 'failed ' + ', '.join(report.checks.failed)}")
    return report
