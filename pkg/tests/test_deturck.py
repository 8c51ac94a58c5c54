import numpy as np
import pytest

from rhflow.core.deturck import FlowState, cfl_dt, flow_rhs, gauge_identity_residual, run, step
from rhflow.core.grid_tensor import GridGeometry, TargetSpec
from rhflow.core.initial_data import build_initial, equator_map, random_map, random_metric, wave_metric
from rhflow.core.monitors import max_principle_bounds
from rhflow.core.reports import Verdict
from rhflow.core.trajectory import CouplingSchedule
from rhflow.utils.error_handler import ConfigError
from rhflow.utils.metrics import MetricsManager


def _fixture_state(nodes: int, seed: int = 2) -> FlowState:
    geom = GridGeometry(2, nodes)
    target = TargetSpec.sphere()
    rng = np.random.default_rng(seed)
    g = random_metric(geom, 0.05, rng)
    phi = random_map(geom, target, 0.3, rng)
    return FlowState(0.0, g, phi, geom, target)


@pytest.mark.parametrize('seed', [1, 2, 3])
def test_gauge_identity_converges_under_refinement(seed):
    coarse = max(gauge_identity_residual(_fixture_state(32, seed), 1.0).values())
    fine = max(gauge_identity_residual(_fixture_state(64, seed), 1.0).values())
    assert coarse / fine >= 8


def test_flat_metric_with_harmonic_map_is_stationary_without_coupling():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    state = FlowState(0.0, geom.identity_metric(), equator_map(geom, target), geom, target)
    g_dot, phi_dot = flow_rhs(state, 0.0)
    assert np.max(np.abs(g_dot)) == 0.0
    assert np.max(np.abs(phi_dot)) < 1e-12

    # with coupling the metric is pushed along the map: ġ = 2α ∇φ⊗∇φ
    g_dot, _ = flow_rhs(state, 0.5)
    assert g_dot[..., 0, 0] == pytest.approx(np.ones(geom.shape), abs=5e-3)
    assert np.max(np.abs(g_dot[..., 1, 1])) == 0.0


def test_cfl_step_for_flat_metric():
    geom = GridGeometry(2, 16)
    assert cfl_dt(geom, geom.identity_metric()) == pytest.approx(0.2 * geom.spacing ** 2)
    assert cfl_dt(geom, 4 * geom.identity_metric(), 0.5) == pytest.approx(0.5 * geom.spacing ** 2 * 4)


def test_step_advances_and_keeps_map_on_sphere(result):
    state = _fixture_state(16)
    dt = cfl_dt(state.geom, state.g)
    outcome = step(state, dt, CouplingSchedule.constant(1.0))
    assert isinstance(outcome, result)
    assert outcome.success
    advanced = outcome.unwrap()
    assert advanced.t == pytest.approx(dt)
    assert advanced.step == 1
    assert np.allclose(np.linalg.norm(advanced.phi, axis=-1), 1.0, atol=1e-12)
    assert np.allclose(advanced.g, np.swapaxes(advanced.g, -1, -2))


def test_step_on_degenerate_metric_suggests_half_step():
    state = _fixture_state(16)
    state = FlowState(0.0, -state.g, state.phi, state.geom, state.target)
    outcome = step(state, 1e-3, CouplingSchedule.constant(1.0))
    assert not outcome.success
    assert outcome.hint == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        outcome.unwrap()


def test_run_samples_and_callbacks():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'perturbed-equator', 0.2, seed=0)
    initial = FlowState(0.0, g, phi, geom, target)
    dt = cfl_dt(geom, g)
    seen = []
    metrics = MetricsManager()
    traj = run(initial, CouplingSchedule.constant(1.0), 6 * dt, dt, sample_stride=2,
               on_sample=lambda state, index: seen.append(index), metrics=metrics)
    assert traj.singularity is None
    assert len(traj.samples) == 4
    assert len(traj.diagnostics) == 7
    assert seen == [1, 2, 3]
    assert traj.times[-1] == pytest.approx(6 * dt)
    assert metrics.get_metrics_report()['stepping']['accepted'] == 6


def test_flat_target_heat_flow_lowers_energy():
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    g, phi = build_initial(geom, target, 'flat', 0.0, 'scalar-wave', 0.3)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(0.5), 20 * dt, dt,
               sample_stride=5)
    energies = [row['energy_max'] for row in traj.diagnostics]
    assert energies[-1] < energies[0]


def test_run_reports_blow_up_threshold():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'perturbed-equator', 0.2)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(1.0), 10 * dt, dt,
               rm_threshold=1e-12)
    assert traj.singularity is not None
    assert traj.singularity.reason == 'blow-up'
    assert traj.singularity.exceeded == ('sup|Rm|',)
    assert traj.singularity.to_dict()['t_sing'] == pytest.approx(dt)


def _swap_axes(g: np.ndarray, phi: np.ndarray):
    """Fields of the reflected torus (x, y) -> (y, x)."""
    return np.swapaxes(g, 0, 1)[..., ::-1, ::-1], np.swapaxes(phi, 0, 1)


def test_flow_preserves_diagonal_reflection_symmetry():
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    x, y = geom.coordinates()
    g = wave_metric(geom, 0.1)
    phi = (0.3 * np.sin(x) * np.sin(y))[..., None]
    g_swapped, phi_swapped = _swap_axes(g, phi)
    assert np.allclose(g_swapped, g, atol=1e-14)
    assert np.allclose(phi_swapped, phi, atol=1e-14)

    dt = cfl_dt(geom, g)
    final = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(0.5), 8 * dt, dt).final
    g_swapped, phi_swapped = _swap_axes(final.g, final.phi)
    assert np.max(np.abs(g_swapped - final.g)) < 1e-12
    assert np.max(np.abs(phi_swapped - final.phi)) < 1e-12


def test_ricci_deturck_flow_smooths_a_bump():
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'constant', 0.0)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(0.0), 40 * dt, dt)
    assert traj.singularity is None
    curvature = [row['rm_max'] for row in traj.diagnostics]
    assert curvature[-1] < 0.7 * curvature[0]
    assert traj.diagnostics[-1]['energy_max'] == 0.0


def test_energy_stays_below_initial_for_strong_coupling_into_sphere():
    """Flat metric, perturbed equator into S² and α = 2 ≥ m·c₀: sup|∇φ|² never exceeds its start."""
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'flat', 0.0, 'perturbed-equator', 0.2)
    dt = cfl_dt(geom, g)
    traj = run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(2.0), 20 * dt, dt,
               sample_stride=5)
    energies = [row['energy_max'] for row in traj.diagnostics]
    assert max(energies) <= energies[0] + 1e-6
    bound = max_principle_bounds(traj)['energy_initial_bound']
    assert bound.verdict == Verdict.PASS


def test_steps_are_split_when_dt_exceeds_the_stability_limit():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'perturbed-equator', 0.2)
    schedule = CouplingSchedule.constant(1.0)
    dt = cfl_dt(geom, g)
    reference = run(FlowState(0.0, g, phi, geom, target), schedule, 12 * dt, dt, sample_stride=4)
    coarse = run(FlowState(0.0, g, phi, geom, target), schedule, 12 * dt, 4 * dt)
    assert coarse.singularity is None
    assert coarse.metadata['cfl_limited_steps'] == 3
    assert np.allclose(coarse.times, reference.times)
    assert [s.step for s in coarse.samples] == [0, 1, 2, 3]
    assert np.max(np.abs(coarse.final.g - reference.final.g)) < 1e-5


def test_cfl_limit_follows_a_shrinking_metric():
    geom = GridGeometry(2, 16)
    target = TargetSpec.sphere()
    g, phi = build_initial(geom, target, 'bump', 0.05, 'perturbed-equator', 0.2)
    dt = cfl_dt(geom, g)
    shrunk = FlowState(0.0, 0.25 * g, phi, geom, target)
    traj = run(shrunk, CouplingSchedule.constant(1.0), 3 * dt, dt)
    assert traj.singularity is None
    assert traj.metadata['cfl_limited_steps'] == 3
    assert np.all(np.isfinite(traj.final.g))


def test_constant_backgrounds_share_the_flat_gauge():
    state = _fixture_state(16)
    flat = flow_rhs(state, 1.0)
    scaled = FlowState(0.0, state.g, state.phi, state.geom, state.target,
                       background=2 * state.geom.identity_metric())
    scaled.validate()
    for a, b in zip(flat, flow_rhs(scaled, 1.0)):
        assert np.array_equal(a, b)


def test_curved_background_is_a_config_error():
    state = _fixture_state(16)
    curved = FlowState(0.0, state.g, state.phi, state.geom, state.target, background=state.g)
    with pytest.raises(ConfigError):
        curved.validate()
    with pytest.raises(ConfigError):
        run(curved, CouplingSchedule.constant(1.0), 1e-3)
