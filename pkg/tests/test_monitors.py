import numpy as np
import pytest

from rhflow.core.deturck import FlowState, cfl_dt, run, step
from rhflow.core.grid_tensor import GridGeometry, TargetSpec
from rhflow.core.homogeneous import HomogeneousState, ModelFamily, ModelKind, integrate_model
from rhflow.core.initial_data import build_initial, constant_map, equator_map
from rhflow.core.monitors import (
    SolitonData, bochner_residual, bounded_growth_check, bounds_from_series, d_quantity_check,
    evolution_residuals, flow_time_derivatives, gradient_estimate_series, hom_d_quantity, hom_soliton_residual,
    max_principle_bounds, monitor_suite, random_vector_fields, renormalization_check, scalar_evolution_rhs,
    soliton_residual,
)
from rhflow.core.reports import Verdict
from rhflow.core.trajectory import CouplingSchedule, DiagnosticSeries

SPHERE = ModelKind(ModelFamily.SPHERE2)


@pytest.mark.parametrize('model, alpha', [
    (SPHERE, 0.5),
    (ModelKind(ModelFamily.PRODUCT), 0.5),
    (ModelKind(ModelFamily.PRODUCT, normalized=True), 3.0),
    (ModelKind(ModelFamily.PRODUCT, flow='ricci'), 0.5),
])
def test_homogeneous_evolution_equations_hold(model, alpha):
    traj = integrate_model(model, CouplingSchedule.constant(alpha), 0.3, 1e-3, sample_stride=30)
    report = evolution_residuals(traj)
    assert report.ok, report.failed
    assert max(c.residual for c in report.checks) <= 1e-8


def test_evolution_with_decreasing_coupling():
    schedule = CouplingSchedule.piecewise_linear([0.0, 0.5], [1.0, 0.4])
    traj = integrate_model(ModelKind(ModelFamily.PRODUCT), schedule, 0.4, 1e-3, sample_stride=20)
    assert evolution_residuals(traj).ok


def test_shrinking_sphere_passes_full_suite():
    traj = integrate_model(SPHERE, CouplingSchedule.constant(0.5), 2.0, 1e-3, sample_stride=10)
    report = monitor_suite(traj)
    assert report.ok, report.failed
    assert report['singularity_time_bound'].details['bound'] == pytest.approx(1.0)
    assert 'energy_doubling_bound' in report.names()


def _series(s_min, energy, alpha=(1.0, 1.0, 1.0)):
    rows = []
    for t, s, e, a in zip((0.0, 0.1, 0.2), s_min, energy, alpha):
        rows.append({'t': t, 'vol': 1.0, 's_min': s, 's_max': s, 'r_max': 1.0, 'energy_max': e,
                     'rm_max': 1.0, 'hess_max': 0.0, 'alpha': a, 'alpha_dot': 0.0})
    return DiagnosticSeries.from_rows(2, rows)


def test_bounds_flag_a_falling_scalar_minimum():
    report = bounds_from_series(_series((1.0, 0.5, 0.2), (1.0, 0.9, 0.8)), target_curvature=0.0)
    assert 's_min_non_decreasing' in report.failed
    assert report['s_min_non_decreasing'].margin == pytest.approx(-0.8)
    assert report['energy_initial_bound'].verdict == Verdict.PASS


def test_bounds_flag_growing_energy_on_flat_target():
    report = bounds_from_series(_series((0.0, 0.0, 0.0), (1.0, 2.0, 3.0)), target_curvature=0.0)
    assert 'energy_initial_bound' in report.failed


def test_bounds_need_non_increasing_coupling():
    series = _series((1.0, 0.5, 0.2), (1.0, 2.0, 3.0), alpha=(0.5, 0.7, 0.9))
    assert bounds_from_series(series, 0.0, non_increasing=False).checks == []


def test_normalized_runs_have_no_maximum_principle_bounds():
    traj = integrate_model(ModelKind(ModelFamily.PRODUCT, normalized=True), CouplingSchedule.constant(3.0),
                           0.2, 1e-2)
    with pytest.raises(ValueError):
        max_principle_bounds(traj)


def test_homogeneous_soliton_and_d_quantity():
    state = HomogeneousState(0.2, 0.8, 1.0, 0.5)
    assert hom_soliton_residual(state, SPHERE).ok
    assert not hom_soliton_residual(state, SPHERE, sigma=0.0).ok

    rng = np.random.default_rng(1)
    for _ in range(5):
        dq = hom_d_quantity(state, SPHERE, rng.normal(size=SPHERE.dim))
        assert dq.residual < 1e-12
        assert float(dq.value) >= 0


def test_flat_torus_steady_soliton():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g = geom.identity_metric()
    phi = constant_map(geom, target)
    steady = soliton_residual(geom, g, phi, SolitonData(np.zeros(geom.shape), 0.0), 1.0, target, tolerance=1e-8)
    assert steady.ok
    assert SolitonData(np.zeros(geom.shape), 0.3).kind == 'expanding'
    expanding = soliton_residual(geom, g, phi, SolitonData(np.zeros(geom.shape), 0.3), 1.0, target,
                                 tolerance=1e-8)
    assert expanding['soliton_metric'].residual == pytest.approx(0.3 * np.sqrt(2))
    assert not expanding.ok


def test_grid_d_quantity_and_bochner(smooth_fixture):
    geom, g, phi, target = smooth_fixture
    state = FlowState(0.0, g, phi, geom, target)
    fields = random_vector_fields(geom, 50, seed=5)
    report = d_quantity_check(state, fields, alpha=1.0)
    assert report.ok, report.failed
    assert report['d_nonnegative'].details['min_value'] >= 0
    assert bochner_residual(geom, g, phi, target).ok


def test_bochner_terms_vanish_for_harmonic_equator():
    geom = GridGeometry(2, 32)
    target = TargetSpec.sphere()
    report = bochner_residual(geom, geom.identity_metric(), equator_map(geom, target), target)
    assert report['bochner'].residual < 1e-10


def test_gradient_estimates_stay_finite():
    traj = integrate_model(SPHERE, CouplingSchedule.constant(2.0), 1.0, 1e-2)
    report = gradient_estimate_series(traj)
    assert report.ok
    assert report.names() == ['gradient_estimate_energy', 'gradient_estimate_curvature',
                              'gradient_estimate_second_order']


def test_gradient_estimates_end_before_a_singularity():
    traj = integrate_model(SPHERE, CouplingSchedule.constant(0.5), 2.0, 1e-3, sample_stride=10)
    report = gradient_estimate_series(traj)
    assert report.ok
    check = report['gradient_estimate_curvature']
    assert check.details['finite_only']
    assert max(check.details['times']) <= traj.singularity.t - 0.01


def test_growing_series_is_not_bounded():
    t = np.linspace(0.0, 1.0, 21)
    assert bounded_growth_check('steady', t, t * 2.0, power=1).verdict == Verdict.PASS
    assert bounded_growth_check('quadratic', t, t ** 2 * 3.0, power=2).verdict == Verdict.PASS
    runaway = bounded_growth_check('runaway', t, t * np.exp(10 * t), power=1)
    assert runaway.verdict == Verdict.FAIL
    assert runaway.details['tail_slope'] > 0
    assert bounded_growth_check('runaway', t, t * np.exp(10 * t), power=1, finite_only=True).passed


BOUND_CONTROLS = [
    # name, target curvature, passing (s_min, energy), failing (s_min, energy)
    ('s_min_comparison', 0.0, ((1.0, 1 / 0.9, 1 / 0.8), (1.0, 0.9, 0.8)), ((1.0, 1.0, 1.0), (1.0, 0.9, 0.8))),
    ('s_min_non_decreasing', 0.0, ((1.0, 1 / 0.9, 1 / 0.8), (1.0, 0.9, 0.8)), ((1.0, 0.5, 0.2), (1.0, 0.9, 0.8))),
    ('s_lower_bound', 0.0, ((-1.0, -1.0, -1.0), (1.0, 0.9, 0.8)), ((-1.0, -20.0, -1.0), (1.0, 0.9, 0.8))),
    ('singularity_time_bound', 0.0, ((1.0, 1 / 0.9, 1 / 0.8), (1.0, 0.9, 0.8)),
     ((10.0, 10.0, 10.0), (1.0, 0.9, 0.8))),
    ('energy_curvature_bound', 0.0, ((1.0, 1 / 0.9, 1 / 0.8), (1.0, 1.0, 1.0)),
     ((1.0, 1 / 0.9, 1 / 0.8), (1.0, 20.0, 1.0))),
    ('energy_initial_bound', 0.0, ((0.0, 0.0, 0.0), (1.0, 0.9, 0.8)), ((0.0, 0.0, 0.0), (1.0, 2.0, 3.0))),
    ('energy_decay_bound', 0.0, ((0.0, 0.0, 0.0), (1.0, 0.9, 0.8)), ((0.0, 0.0, 0.0), (1.0, 20.0, 1.0))),
    ('energy_doubling_bound', 1.0, ((0.0, 0.0, 0.0), (1.0, 1.1, 1.2)), ((0.0, 0.0, 0.0), (1.0, 2.5, 1.0))),
    ('energy_comparison_bound', 1.0, ((0.0, 0.0, 0.0), (1.0, 1.1, 1.2)), ((0.0, 0.0, 0.0), (1.0, 1.3, 1.2))),
]


@pytest.mark.parametrize('name, c0, passing, failing', BOUND_CONTROLS, ids=[row[0] for row in BOUND_CONTROLS])
def test_each_bound_has_a_passing_and_a_failing_control(name, c0, passing, failing):
    assert bounds_from_series(_series(*passing), target_curvature=c0)[name].verdict == Verdict.PASS
    assert bounds_from_series(_series(*failing), target_curvature=c0)[name].verdict == Verdict.FAIL


@pytest.mark.parametrize('target, metric, map_name, alpha', [
    (TargetSpec.flat_scalar(), 'bump', 'scalar-wave', 0.5),
    (TargetSpec.sphere(), 'flat', 'perturbed-equator', 2.0),
])
def test_grid_runs_respect_maximum_principle_bounds(target, metric, map_name, alpha):
    geom = GridGeometry(2, 16)
    g, phi = build_initial(geom, target, metric, 0.05, map_name, 0.2)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(alpha), 20 * dt, dt,
               sample_stride=5)
    report = max_principle_bounds(traj)
    assert report.ok, report.failed
    assert {'s_min_non_decreasing', 's_lower_bound', 'energy_initial_bound'} <= set(report.names())


def _curved_state(nodes: int) -> FlowState:
    geom = GridGeometry(2, nodes)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'wave', 0.2, 'perturbed-equator', 0.2)
    return FlowState(0.0, g, phi, geom, target)


def test_grid_evolution_needs_the_gauge_advection():
    state = _curved_state(32)
    dt = cfl_dt(state.geom, state.g)
    traj = run(state, CouplingSchedule.constant(1.0), 2 * dt, dt)
    corrected = evolution_residuals(traj)
    uncorrected = evolution_residuals(traj, gauge_correction=False)
    assert corrected.ok, corrected.failed
    for check in corrected.checks:
        assert uncorrected[check.name].residual > 5 * check.residual, check.name


def test_flow_derivative_is_the_time_derivative_of_the_discrete_fields():
    state = _curved_state(16)
    schedule = CouplingSchedule.constant(1.0)
    eps = 1e-5
    ahead = step(state, eps, schedule).unwrap()
    behind = step(state, -eps, schedule).unwrap()

    def fields(s):
        return scalar_evolution_rhs(s.geom, s.g, s.phi, s.target, 1.0)['fields']

    exact = flow_time_derivatives(state, 1.0)
    assert set(exact) == {'s', 'energy', 'scalar'}
    f_ahead, f_behind = fields(ahead), fields(behind)
    for key, value in exact.items():
        numeric = (f_ahead[key] - f_behind[key]) / (2 * eps)
        assert np.max(np.abs(numeric - value)) <= 1e-5 * max(1.0, np.max(np.abs(value))), key


def test_sample_differences_skip_the_end_samples():
    state = _curved_state(16)
    dt = cfl_dt(state.geom, state.g)
    traj = run(state, CouplingSchedule.constant(1.0), 4 * dt, dt)
    samples = evolution_residuals(traj, derivative='samples', tolerance=np.inf)
    flow = evolution_residuals(traj, tolerance=np.inf)
    assert len(samples['evolution_S'].details['times']) == len(traj.samples) - 2
    assert len(flow['evolution_S'].details['times']) == len(traj.samples)
    with pytest.raises(ValueError):
        evolution_residuals(traj, derivative='spectral')


def test_normalized_run_matches_renormalized_unnormalized_run():
    traj = integrate_model(ModelKind(ModelFamily.PRODUCT, normalized=True), CouplingSchedule.constant(3.0),
                           0.3, 1e-3, sample_stride=10)
    check = renormalization_check(traj)
    assert check.verdict == Verdict.PASS
    assert check.residual <= 1e-6
    assert 0.1 < check.details['covered'] <= 0.3
    assert 'renormalization_consistency' in monitor_suite(traj).names()
    assert renormalization_check(integrate_model(SPHERE, CouplingSchedule.constant(0.5), 0.2, 1e-3)) is None
