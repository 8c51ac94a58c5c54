import math

import numpy as np
import pytest

from rhflow.core.deturck import FlowState, cfl_dt, run
from rhflow.core.grid_tensor import GridGeometry, TargetSpec
from rhflow.core.homogeneous import ModelFamily, ModelKind, integrate_model
from rhflow.core.initial_data import build_initial
from rhflow.core.reduced_volume import (
    DiscretePath, PathField, flat_distance_oracle, lb_length, reduced_distance, reduced_volume, reduced_volume_series,
    sphere_distance_oracle, sphere_volume_oracle,
)
from rhflow.core.trajectory import CouplingSchedule
from rhflow.utils.error_handler import CoverageError, InsufficientSamplesError
from rhflow.utils.metrics import MetricsManager

SPHERE = ModelKind(ModelFamily.SPHERE2)


@pytest.fixture(scope='module')
def static_torus():
    """A flat torus with a constant scalar map; the flow leaves it fixed."""
    geom = GridGeometry(2, 16)
    target = TargetSpec.flat_scalar()
    g, phi = build_initial(geom, target, 'flat', 0.0, 'constant', 0.0)
    dt = cfl_dt(geom, g)
    return run(FlowState(0.0, g, phi, geom, target), CouplingSchedule.constant(0.5), 0.5, dt, sample_stride=4)


@pytest.fixture(scope='module')
def shrinking_sphere():
    return integrate_model(SPHERE, CouplingSchedule.constant(0.5), 0.5, 1e-3)


def test_path_validation():
    with pytest.raises(ValueError):
        DiscretePath.straight([0.0, 0.0], [1.0, 0.0], 0.3, segments=8)
    with pytest.raises(ValueError):
        DiscretePath.straight([0.0], [1.0], 0.0)
    path = DiscretePath.straight([0.0, 0.0], [1.0, 0.5], 0.25, segments=16)
    with pytest.raises(ValueError):
        DiscretePath(np.array([0.1, 0.0]), 0.25, path.positions)
    assert path.positions.shape == (17, 2)
    assert path.dlam == pytest.approx(0.5 / 16)
    assert np.allclose(path.end, [1.0, 0.5])


def test_straight_path_action_on_static_torus(static_torus):
    q = np.array([0.6, -0.4])
    tau1 = 0.4
    path = DiscretePath.straight([0.0, 0.0], q, tau1, segments=16)
    # ½|q|²/√τ₁ for a constant-speed path in λ with S = 0
    assert lb_length(path, static_torus) == pytest.approx(0.5 * np.sum(q ** 2) / math.sqrt(tau1), rel=1e-12)


@pytest.mark.parametrize('q', [(0.5, 0.3), (6.0, 0.2)])
def test_flat_reduced_distance_matches_oracle(static_torus, q):
    tau1 = 0.4
    result = reduced_distance(q, tau1, static_torus, segments=16, starts=3)
    expected = flat_distance_oracle(q, (0.0, 0.0), tau1, static_torus.geom.period)
    assert result.value == pytest.approx(expected, rel=1e-8, abs=1e-10)
    assert not result.approximate
    assert min(result.seed_values) == pytest.approx(result.value)


def test_paths_must_stay_inside_the_run(static_torus):
    with pytest.raises(CoverageError):
        reduced_distance((0.1, 0.1), 0.9, static_torus, segments=16, starts=1)
    with pytest.raises(ValueError):
        reduced_distance((0.1, 0.1), 0.2, static_torus, segments=8)


def test_great_circle_distance_matches_quadrature(shrinking_sphere):
    tau1 = 0.3
    for theta in (0.0, 0.7, 1.5):
        result = reduced_distance([theta], tau1, shrinking_sphere, segments=64, starts=2)
        expected = sphere_distance_oracle(shrinking_sphere, theta, tau1)
        assert result.value == pytest.approx(expected, rel=1e-3)


def test_sphere_reduced_volume_is_monotone(shrinking_sphere):
    metrics = MetricsManager()
    report = reduced_volume_series(shrinking_sphere, [0.3, 0.05, 0.15], metrics=metrics)
    assert report.taus == [0.05, 0.15, 0.3]
    assert report.ok, report.checks.failed
    assert all(0 < v < 1 for v in report.values)
    assert report.values == sorted(report.values, reverse=True)
    assert 'reduced_volume' in metrics.get_metrics_report()['phases']
    assert reduced_volume(0.15, shrinking_sphere) == pytest.approx(report.values[1])
    assert set(report.to_dict()) >= {'taus', 'values', 'checks'}


def test_series_needs_two_taus(shrinking_sphere):
    with pytest.raises(InsufficientSamplesError):
        reduced_volume_series(shrinking_sphere, [0.1])


def test_flat_reduced_distance_at_many_endpoints(static_torus):
    tau1 = 0.4
    t0 = static_torus.times[-1]
    pf = PathField.build(static_torus, t0, tau1, 16)
    period = static_torus.geom.period
    rng = np.random.default_rng(11)
    for q in rng.uniform(-period / 2, period / 2, size=(100, 2)):
        result = reduced_distance(q, tau1, static_torus, segments=16, starts=1, pf=pf)
        assert result.value == pytest.approx(flat_distance_oracle(q, (0.0, 0.0), tau1, period), abs=1e-4)


def test_flat_torus_reduced_volume_is_one(static_torus):
    assert reduced_volume(0.2, static_torus, segments=16, starts=1) == pytest.approx(1.0, abs=1e-4)


def test_sphere_reduced_volume_converges_with_segments(shrinking_sphere):
    tau = 0.3
    oracle = sphere_volume_oracle(shrinking_sphere, tau)
    errors = [abs(reduced_volume(tau, shrinking_sphere, segments=k) - oracle) for k in (32, 64)]
    assert errors[0] < 1e-3 * oracle
    # midpoint quadrature in λ is second order
    assert errors[1] < errors[0] / 3
