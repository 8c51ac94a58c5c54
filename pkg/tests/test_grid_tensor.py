import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhflow.core.grid_tensor import (
    GridGeometry, TargetSpec, analyze_state, check_map_constraint, check_positive_definite, christoffel,
    compute_geometry, lichnerowicz_laplacian, map_calculus, metric_algebra, partial, s_fields, scalar_calculus,
    second_partial, tensor_inner,
)
from rhflow.core.initial_data import conformal_metric, equator_map, random_map, random_metric
from rhflow.utils.error_handler import ConstraintViolationError, DegenerateMetricError


def test_grid_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry(3, 16)
    with pytest.raises(ValueError):
        GridGeometry(2, 4)
    geom = GridGeometry(2, 16)
    assert geom.refine(2).nodes == 32
    assert geom.identity_metric().shape == (16, 16, 2, 2)


def test_flat_metric_has_no_curvature(torus2):
    bundle = compute_geometry(torus2, torus2.identity_metric())
    assert np.max(np.abs(bundle.riemann)) == 0.0
    assert np.max(np.abs(bundle.scalar)) == 0.0
    assert bundle.volume == pytest.approx(torus2.period ** 2)


def test_stencils_are_fourth_order():
    errors = []
    for n in (16, 32):
        geom = GridGeometry(1, n)
        (x,) = geom.coordinates()
        first = np.max(np.abs(partial(geom, np.sin(2 * x), 0) - 2 * np.cos(2 * x)))
        second = np.max(np.abs(second_partial(geom, np.sin(2 * x), 0, 0) + 4 * np.sin(2 * x)))
        errors.append((first, second))
    assert errors[0][0] / errors[1][0] > 10
    assert errors[0][1] / errors[1][1] > 10


def test_conformal_scalar_curvature():
    geom = GridGeometry(2, 32)
    x, y = geom.coordinates()
    u = 0.2 * np.cos(x) * np.cos(y)
    bundle = compute_geometry(geom, conformal_metric(geom, u))
    assert np.max(np.abs(bundle.scalar - 4 * u * np.exp(-2 * u))) < 1e-3


def test_scalar_laplacian_on_flat_torus(torus2):
    x, y = torus2.coordinates()
    f = np.sin(x) * np.cos(y)
    calc = scalar_calculus(torus2, torus2.identity_metric(), f)
    assert np.max(np.abs(calc.laplacian + 2 * f)) < 1e-2


def test_degenerate_metric_names_the_node(torus2):
    g = torus2.identity_metric()
    g[3, 5] = -np.eye(2)
    with pytest.raises(DegenerateMetricError) as excinfo:
        check_positive_definite(g)
    assert excinfo.value.node == (3, 5)


def test_equator_map_is_harmonic():
    geom = GridGeometry(2, 32)
    target = TargetSpec.sphere()
    mc = map_calculus(geom, geom.identity_metric(), equator_map(geom, target), target)
    assert np.max(np.abs(mc.tension)) < 1e-10
    assert np.max(np.abs(mc.energy_density - 1.0)) < 1e-3


def test_map_off_the_sphere_is_rejected(torus2, sphere_target):
    phi = random_map(torus2, sphere_target, 0.3, np.random.default_rng(0))
    phi[2, 2] *= 1.01
    with pytest.raises(ConstraintViolationError) as excinfo:
        check_map_constraint(phi, sphere_target)
    assert excinfo.value.node == (2, 2)


def test_state_geometry_quantities(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    geo = analyze_state(geom, g, phi, target)
    s_ij, s = geo.s_fields(0.5)
    assert np.allclose(s, np.einsum('...ij,...ij->...', geo.inverse, s_ij))
    # the round-sphere term is |∇φ|⁴ - |∇φ⊗∇φ|² ≥ 0
    assert np.min(geo.target_term) >= -1e-12
    assert np.all(geo.riemann_norm() >= 0)
    with pytest.raises(ValueError):
        s_fields(geom, g, phi, -1.0, target, geo.bundle, geo.maps)


def test_geometry_cache_reuses_bundles(torus2, cache):
    g = torus2.identity_metric()
    first = compute_geometry(torus2, g, cache)
    second = compute_geometry(torus2, g.copy(), cache)
    assert first is second
    assert cache.get_metrics()['hits'] == 1


@given(st.floats(min_value=0.2, max_value=5.0), st.integers(min_value=2, max_value=6))
@settings(max_examples=25, deadline=None)
def test_projection_lands_on_sphere_and_tangent_part_is_orthogonal(radius, dim):
    target = TargetSpec.sphere(radius, dim)
    rng = np.random.default_rng(dim)
    phi = target.project(rng.normal(size=(5, dim)) + 0.1)
    assert np.allclose(np.linalg.norm(phi, axis=-1), radius)
    v = rng.normal(size=(5, dim))
    assert np.allclose(np.sum(target.tangent_part(phi, v) * phi, axis=-1), 0.0, atol=1e-10 * radius)


def test_tensor_inner_of_metric_is_dimension():
    geom = GridGeometry(2, 8)
    g = 2.0 * geom.identity_metric()
    inverse = np.linalg.inv(g)
    assert np.allclose(tensor_inner(inverse, g), 2.0)
    assert math.isclose(compute_geometry(geom, g).volume, 2.0 * geom.period ** 2)


def _conformal(n: int):
    geom = GridGeometry(2, n)
    x, y = geom.coordinates()
    u = 0.2 * np.cos(x) * np.cos(y)
    du = np.stack([-0.2 * np.sin(x) * np.cos(y), -0.2 * np.cos(x) * np.sin(y)], axis=-1)
    return geom, u, du


def test_conformal_christoffel_symbols():
    errors = []
    for n in (32, 64):
        geom, u, du = _conformal(n)
        delta = np.eye(2)
        # Γ^k_ij = δ^k_i ∂_j u + δ^k_j ∂_i u - δ_ij ∂^k u
        exact = (np.einsum('ki,...j->...kij', delta, du) + np.einsum('kj,...i->...kij', delta, du)
                 - np.einsum('ij,...k->...kij', delta, du))
        gamma = christoffel(geom, conformal_metric(geom, u))
        errors.append(np.max(np.abs(gamma - exact)))
    assert errors[0] < 1e-3
    assert errors[0] / errors[1] > 10


def test_curvature_and_laplacian_converge_at_fourth_order():
    curvature_errors, laplacian_errors = [], []
    for n in (32, 64):
        geom, u, _ = _conformal(n)
        x, y = geom.coordinates()
        g = conformal_metric(geom, u)
        bundle = compute_geometry(geom, g)
        curvature_errors.append(np.max(np.abs(bundle.scalar - 4 * u * np.exp(-2 * u))))
        f = np.sin(x) * np.cos(2 * y)
        # in two dimensions Δ_g = e^{-2u} Δ_δ
        lap = scalar_calculus(geom, g, f, bundle).laplacian
        laplacian_errors.append(np.max(np.abs(lap + 5 * np.exp(-2 * u) * f)))
    assert curvature_errors[0] / curvature_errors[1] > 10
    assert laplacian_errors[0] / laplacian_errors[1] > 10


def test_riemann_symmetries():
    geom = GridGeometry(2, 32)
    g = random_metric(geom, 0.05, np.random.default_rng(7))
    bundle = compute_geometry(geom, g)
    rm = bundle.riemann
    scale = np.max(np.abs(rm))
    assert np.max(np.abs(rm + np.swapaxes(rm, -1, -2))) <= 1e-14 * max(1.0, scale)
    bianchi = rm + np.einsum('...asmn->...amns', rm) + np.einsum('...asmn->...ansm', rm)
    assert np.max(np.abs(bianchi)) <= 1e-12 * max(1.0, scale)
    assert np.max(np.abs(rm + np.einsum('...asmn->...samn', rm))) <= 1e-3 * scale
    assert np.max(np.abs(rm - np.einsum('...asmn->...mnas', rm))) <= 1e-3 * scale
    # surfaces: R_abcd = ½R (g_ac g_bd - g_ad g_bc)
    model = 0.5 * bundle.scalar[..., None, None, None, None] * (
        np.einsum('...ac,...bd->...abcd', g, g) - np.einsum('...ad,...bc->...abcd', g, g))
    assert np.max(np.abs(rm - model)) <= 1e-3 * scale


@pytest.mark.parametrize('c', [0.5, 3.0])
def test_constant_rescaling_laws(smooth_fixture, c):
    geom, g, _, _ = smooth_fixture
    base = compute_geometry(geom, g)
    scaled = compute_geometry(geom, c * g)
    assert np.allclose(scaled.gamma, base.gamma, atol=1e-12)
    assert np.allclose(scaled.riemann, c * base.riemann, atol=1e-12)
    assert np.allclose(scaled.ricci, base.ricci, atol=1e-12)
    assert np.allclose(scaled.scalar, base.scalar / c, atol=1e-12)
    assert scaled.volume == pytest.approx(c ** (geom.dim / 2) * base.volume, rel=1e-12)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=20, deadline=None)
def test_inverse_of_random_positive_definite_fields(seed):
    geom = GridGeometry(2, 8)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=geom.shape + (2, 2))
    g = np.einsum('...ik,...jk->...ij', a, a) + 0.1 * np.eye(2)
    alg = metric_algebra(geom, g)
    assert np.allclose(np.einsum('...ij,...jk->...ik', alg.inverse, g), np.eye(2), atol=1e-9)
    assert np.allclose(alg.inverse, np.swapaxes(alg.inverse, -1, -2))
    assert np.allclose(alg.det, np.linalg.det(g))


def test_lichnerowicz_laplacian_on_flat_torus():
    errors = []
    for n in (16, 32):
        geom = GridGeometry(2, n)
        x, _ = geom.coordinates()
        t = np.sin(x)[..., None, None] * np.eye(2)
        out = lichnerowicz_laplacian(geom, geom.identity_metric(), t)
        errors.append(np.max(np.abs(out + t)))
    assert errors[1] < 1e-3
    assert errors[0] / errors[1] > 10
