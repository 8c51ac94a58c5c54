"""
Named initial metrics and maps for grid runs.
"""

import logging
from typing import Callable, Dict, Tuple

import numpy as np

from .grid_tensor import GridGeometry, TargetSpec, check_positive_definite

logger = logging.getLogger(__name__)


def flat_metric(geom: GridGeometry, amplitude: float = 0.0, rng=None) -> np.ndarray:
    return geom.identity_metric()


def bump_metric(geom: GridGeometry, amplitude: float = 0.05, rng=None) -> np.ndarray:
    """Localized, non-conformal bump symmetric under x ↔ y."""
    g = geom.identity_metric()
    if geom.dim == 1:
        (x,) = geom.coordinates()
        g[..., 0, 0] += amplitude * np.exp(2 * (np.cos(x) - 1))
        return g
    x, y = geom.coordinates()
    bump = np.exp(2 * (np.cos(x) + np.cos(y) - 2))
    g[..., 0, 0] += amplitude * bump * (1 + 0.5 * np.sin(x))
    g[..., 1, 1] += amplitude * bump * (1 + 0.5 * np.sin(y))
    g[..., 0, 1] += 0.3 * amplitude * bump
    g[..., 1, 0] = g[..., 0, 1]
    return g


def wave_metric(geom: GridGeometry, amplitude: float = 0.1, rng=None) -> np.ndarray:
    """Smooth non-conformal perturbation of δ, symmetric under x ↔ y."""
    g = geom.identity_metric()
    if geom.dim == 1:
        (x,) = geom.coordinates()
        g[..., 0, 0] += amplitude * np.sin(x)
        return g
    x, y = geom.coordinates()
    g[..., 0, 0] += amplitude * (np.sin(x) + 0.5 * np.cos(2 * y))
    g[..., 1, 1] += amplitude * (np.sin(y) + 0.5 * np.cos(2 * x))
    g[..., 0, 1] += 0.5 * amplitude * np.sin(x + y)
    g[..., 1, 0] = g[..., 0, 1]
    return g


def conformal_metric(geom: GridGeometry, u: np.ndarray) -> np.ndarray:
    """e^{2u} δ."""
    return np.exp(2 * u)[..., None, None] * geom.identity_metric()


def conformal_cos_metric(geom: GridGeometry, amplitude: float = 0.2, rng=None) -> np.ndarray:
    coords = geom.coordinates()
    u = amplitude * np.prod([np.cos(x) for x in coords], axis=0)
    return conformal_metric(geom, u)


def random_metric(geom: GridGeometry, amplitude: float = 0.05, rng=None) -> np.ndarray:
    """δ plus random low Fourier modes in every component."""
    rng = rng if rng is not None else np.random.default_rng(0)
    g = geom.identity_metric()
    coords = geom.coordinates()
    m = geom.dim
    for i in range(m):
        for j in range(i, m):
            field = np.zeros(geom.shape)
            for _ in range(3):
                k = rng.integers(-2, 3, size=m)
                phase = rng.uniform(0, 2 * np.pi)
                field += rng.normal() * np.cos(sum(kk * x for kk, x in zip(k, coords)) + phase)
            g[..., i, j] += amplitude * field / 3
            if i != j:
                g[..., j, i] = g[..., i, j]
    check_positive_definite(g)
    return g


METRICS: Dict[str, Callable[..., np.ndarray]] = {
    'flat': flat_metric,
    'bump': bump_metric,
    'wave': wave_metric,
    'conformal': conformal_cos_metric,
    'random': random_metric,
}


def constant_map(geom: GridGeometry, target: TargetSpec, amplitude: float = 0.0, rng=None) -> np.ndarray:
    phi = np.zeros(geom.shape + (target.embedding_dim,))
    phi[..., -1] = target.radius if target.is_sphere else 0.0
    return phi


def equator_map(geom: GridGeometry, target: TargetSpec, amplitude: float = 0.0, rng=None) -> np.ndarray:
    """x ↦ ρ(cos x, sin x, 0, ...); harmonic on the flat torus of period 2π."""
    if not target.is_sphere:
        raise ValueError("the equator map needs a sphere target")
    x = geom.coordinates()[0]
    phi = np.zeros(geom.shape + (target.embedding_dim,))
    phi[..., 0] = target.radius * np.cos(x)
    phi[..., 1] = target.radius * np.sin(x)
    return phi


def perturbed_equator_map(geom: GridGeometry, target: TargetSpec, amplitude: float = 0.2, rng=None) -> np.ndarray:
    if not target.is_sphere or target.embedding_dim < 3:
        raise ValueError("the perturbed equator map needs a sphere target in R^3 or higher")
    coords = geom.coordinates()
    x = coords[0]
    wobble = np.sin(coords[1]) if geom.dim == 2 else np.sin(2 * x)
    phi = np.zeros(geom.shape + (target.embedding_dim,))
    phi[..., 0] = np.cos(x + amplitude * wobble)
    phi[..., 1] = np.sin(x + amplitude * wobble)
    phi[..., 2] = amplitude * np.cos(x) * (1 + wobble)
    return target.project(phi)


def scalar_wave_map(geom: GridGeometry, target: TargetSpec, amplitude: float = 0.3, rng=None) -> np.ndarray:
    if target.is_sphere:
        raise ValueError("the scalar wave map needs a flat-scalar target")
    coords = geom.coordinates()
    values = amplitude * np.prod([np.sin(x) for x in coords], axis=0) + 0.5 * amplitude * np.cos(coords[0])
    return values[..., None]


def random_map(geom: GridGeometry, target: TargetSpec, amplitude: float = 0.3, rng=None) -> np.ndarray:
    """Constant map plus random low modes, projected onto the target."""
    rng = rng if rng is not None else np.random.default_rng(0)
    coords = geom.coordinates()
    phi = constant_map(geom, target)
    for lam in range(target.embedding_dim):
        k = rng.integers(-2, 3, size=geom.dim)
        phase = rng.uniform(0, 2 * np.pi)
        phi[..., lam] += amplitude * target.radius * np.cos(sum(kk * x for kk, x in zip(k, coords)) + phase)
    return target.project(phi)


MAPS: Dict[str, Callable[..., np.ndarray]] = {
    'constant': constant_map,
    'equator': equator_map,
    'perturbed-equator': perturbed_equator_map,
    'scalar-wave': scalar_wave_map,
    'random': random_map,
}


def build_initial(geom: GridGeometry, target: TargetSpec, metric: str, metric_amplitude: float,
                  map_name: str, map_amplitude: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Initial (g, φ) by fixture name; one generator seeds both fields."""
    if metric not in METRICS:
        raise KeyError(f"unknown initial metric '{metric}'")
    if map_name not in MAPS:
        raise KeyError(f"unknown initial map '{map_name}'")
    rng = np.random.default_rng(seed)
    g = METRICS[metric](geom, metric_amplitude, rng)
    phi = MAPS[map_name](geom, target, map_amplitude, rng)
    logger.debug(f"Initial data: metric={metric}({metric_amplitude}), map={map_name}({map_amplitude})")
    return g, phi
