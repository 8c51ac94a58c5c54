import math

import numpy as np
import pytest
from scipy import linalg

from rhflow.commands.analysis import smooth_field
from rhflow.core.deturck import FlowState, cfl_dt, run
from rhflow.core.functionals import (
    SchrodingerOperator, adjoint_heat_solve, energy_F, entropy_W, first_variation_check, gradient_flow_rhs,
    hom_energy_F, hom_entropy_W, integrated_variation_F, lambda_alpha, lambda_upper_bound_check,
    monotonicity_series, mu_alpha, normalize_potential, tangent_projection, variation_F,
)
from rhflow.core.grid_tensor import GridGeometry, TargetSpec, compute_geometry
from rhflow.core.homogeneous import ModelFamily, ModelKind, integrate_model
from rhflow.core.initial_data import build_initial, constant_map
from rhflow.core.reports import Verdict
from rhflow.core.trajectory import CouplingSchedule
from rhflow.utils.error_handler import ConstraintViolationError

SPHERE = ModelKind(ModelFamily.SPHERE2)


def test_lambda_and_mu_on_flat_torus_with_constant_map(torus2, sphere_target):
    g = torus2.identity_metric()
    phi = constant_map(torus2, sphere_target)
    lam = lambda_alpha(torus2, g, phi, 1.0, sphere_target)
    assert lam.value == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(lam.vector, lam.vector.flat[0])

    tau = 0.5
    mu = mu_alpha(torus2, g, phi, tau, 1.0, sphere_target)
    volume = torus2.period ** 2
    assert mu.value == pytest.approx(math.log(volume / (4 * math.pi * tau)) - 2, abs=1e-8)


def test_lambda_is_below_mean_of_potential(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    check = lambda_upper_bound_check(geom, g, phi, 0.7, target)
    assert check.passed
    assert check.margin >= 0
    assert check.details['lambda'] <= check.details['mean_S'] + 1e-8


def test_normalized_potential_has_unit_mass(smooth_fixture):
    geom, g, _, _ = smooth_fixture
    x, y = geom.coordinates()
    weights = compute_geometry(geom, g).volume_weight
    f = normalize_potential(geom, g, np.sin(x) * np.cos(y))
    assert np.sum(np.exp(-f) * weights) == pytest.approx(1.0)
    f_tau = normalize_potential(geom, g, np.sin(x) * np.cos(y), tau=0.3)
    assert np.sum((4 * math.pi * 0.3) ** -1 * np.exp(-f_tau) * weights) == pytest.approx(1.0)


def _random_directions(geom, phi, target, rng):
    m = geom.dim
    h = smooth_field(geom, m * m, rng).reshape(geom.shape + (m, m))
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    theta = tangent_projection(phi, smooth_field(geom, target.embedding_dim, rng), target)
    ell = smooth_field(geom, 1, rng)[..., 0]
    return h, theta, ell


@pytest.mark.parametrize('tau', [None, 0.4])
def test_first_variation_along_random_directions(smooth_fixture, tau):
    """Curved metric, generic sphere map, nonconstant f: twenty random (h, ϑ, ℓ) all match."""
    geom, g, phi, target = smooth_fixture
    rng = np.random.default_rng(11)
    f = normalize_potential(geom, g, 0.3 * smooth_field(geom, 1, rng)[..., 0], tau)
    for _ in range(20):
        h, theta, ell = _random_directions(geom, phi, target, rng)
        sigma = float(rng.normal()) if tau is not None else 0.0
        check = first_variation_check(geom, g, phi, f, 0.8, target, h, theta, ell, tau, sigma)
        assert check.passed, check.to_dict()


def test_integrated_variation_agrees_up_to_discretization(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    rng = np.random.default_rng(5)
    f = normalize_potential(geom, g, 0.3 * smooth_field(geom, 1, rng)[..., 0])
    h, theta, ell = _random_directions(geom, phi, target, rng)
    exact = variation_F(geom, g, phi, f, 1.0, target, h, theta, ell)
    integrated = integrated_variation_F(geom, g, phi, f, 1.0, target, h, theta, ell)
    assert exact != integrated
    assert abs(exact - integrated) <= 1e-2 * max(1.0, abs(exact))


def test_variation_must_be_tangent(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    f = normalize_potential(geom, g, np.zeros(geom.shape))
    zeros = np.zeros(geom.shape)
    with pytest.raises(ConstraintViolationError):
        first_variation_check(geom, g, phi, f, 1.0, target, np.zeros_like(g), phi.copy(), zeros)
    theta = tangent_projection(phi, np.ones_like(phi), target)
    assert np.max(np.abs(np.sum(theta * phi, axis=-1))) < 1e-12


def test_gradient_flow_raises_energy(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    f = normalize_potential(geom, g, np.zeros(geom.shape))
    rates = gradient_flow_rhs(geom, g, phi, f, 1.0, target)
    assert rates.dF >= 0
    assert rates.g_dot.shape == g.shape
    assert np.isfinite(energy_F(geom, g, phi, f, 1.0, target))
    assert np.isfinite(entropy_W(geom, g, phi, normalize_potential(geom, g, f, 1.0), 1.0, 1.0, target))
    with pytest.raises(ValueError):
        entropy_W(geom, g, phi, f, 0.0, 1.0, target)


def test_shrinking_sphere_has_constant_entropy():
    traj = integrate_model(SPHERE, CouplingSchedule.constant(0.5), 0.6, 1e-3, sample_stride=10)
    report = monotonicity_series(traj, tau_horizon=1.0)
    assert report.ok, report.checks.failed
    # τS = 1 and vol = τ along the whole run
    assert report.values['W'] == pytest.approx([-1 - math.log(4 * math.pi)] * len(traj.samples), abs=1e-12)
    assert report.values['F'] == pytest.approx([1 / (1 - t) for t in traj.times], rel=1e-12)
    assert hom_energy_F(traj.samples[0], SPHERE) == pytest.approx(1.0)
    assert hom_entropy_W(traj.samples[0], SPHERE, 1.0) == pytest.approx(-1 - math.log(4 * math.pi))


def test_normalized_models_report_values_only():
    model = ModelKind(ModelFamily.PRODUCT, normalized=True)
    traj = integrate_model(model, CouplingSchedule.constant(3.0), 1.0, 1e-2, sample_stride=10)
    report = monotonicity_series(traj)
    assert report.checks.checks == []
    assert len(report.values['lambda']) == len(traj.samples)


def _short_grid_run(steps: int = 6):
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'scalar-wave', 0.3)
    dt = cfl_dt(geom, g)
    return run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(0.5), steps * dt, dt)


def test_adjoint_solution_conserves_mass():
    traj = _short_grid_run()
    solution = adjoint_heat_solve(traj)
    assert np.allclose(solution.masses, 1.0, atol=1e-10)
    assert all(np.all(u > 0) for u in solution.u)
    assert solution.potential(0).shape == traj.geom.shape


def test_grid_series_reports_spectral_values():
    traj = _short_grid_run()
    report = monotonicity_series(traj, tau_horizon=1.0, max_samples=3, adjoint=True)
    assert len(report.times) == 3
    for name in ('lambda', 'lambda_bar', 'mu', 'tau'):
        assert len(report.values[name]) == 3
    assert len(report.values['F']) == len(traj.samples)
    assert 'lambda_non_decreasing' in report.checks.names()
    assert report.checks['adjoint_mass_conserved'].passed
    assert report.checks['adjoint_duality'].passed
    assert report.checks['adjoint_duality'].details['sample_dt'] > 0


def test_increasing_coupling_makes_monotonicity_informational():
    schedule = CouplingSchedule.piecewise_linear([0.0, 0.1], [0.0, 0.9])
    traj = integrate_model(SPHERE, schedule, 0.1, 1e-3, sample_stride=10)
    report = monotonicity_series(traj, tau_horizon=2.0)
    check = report.checks['F_non_decreasing']
    assert check.verdict == Verdict.WARN
    assert check.details['informational']
    assert check.details['schedule_non_increasing'] is False
    assert 'F_non_decreasing' not in report.checks.failed


def test_lambda_agrees_with_dense_generalized_eigensolver(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    lam = lambda_alpha(geom, g, phi, 1.0, target)
    a, b = SchrodingerOperator.build(geom, g, phi, 1.0, target).dense()
    values, vectors = linalg.eigh(a, b, subset_by_index=[0, 0])
    assert lam.value == pytest.approx(values[0], abs=1e-9)
    dense = vectors[:, 0] * np.sign(np.sum(vectors[:, 0]))
    dense = dense / math.sqrt(np.sum(np.diag(b) * dense ** 2))
    assert np.allclose(lam.vector.ravel(), dense, atol=1e-6)


@pytest.mark.parametrize('c', [0.3, 1.0, 7.0])
def test_lambda_bar_is_scale_invariant(smooth_fixture, c):
    geom, g, phi, target = smooth_fixture
    base = lambda_alpha(geom, g, phi, 0.5, target)
    scaled = lambda_alpha(geom, c * g, phi, 0.5, target)
    assert scaled.value == pytest.approx(base.value / c, rel=1e-8, abs=1e-10)
    assert scaled.bar == pytest.approx(base.bar, rel=1e-8, abs=1e-10)


def test_mu_is_invariant_under_joint_scaling(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    tau, c = 2.5, 3.0
    base = mu_alpha(geom, g, phi, tau, 1.0, target)
    scaled = mu_alpha(geom, c * g, phi, c * tau, 1.0, target)
    unit = mu_alpha(geom, g / tau, phi, 1.0, 1.0, target)
    assert scaled.value == pytest.approx(base.value, abs=1e-8)
    assert unit.value == pytest.approx(base.value, abs=1e-8)


def test_spectral_functionals_do_not_decrease_along_a_perturbed_flat_run():
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'scalar-wave', 0.3)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(1.0), 12 * dt, dt)
    report = monotonicity_series(traj, tau_horizon=1.0, max_samples=10)
    assert len(report.times) == 10
    for name in ('lambda_non_decreasing', 'mu_non_decreasing'):
        assert report.checks[name].passed, report.checks[name].details
    assert np.all(np.diff(report.values['lambda']) >= -1e-6)
