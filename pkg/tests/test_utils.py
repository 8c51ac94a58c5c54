import logging

import numpy as np
import pytest

from rhflow.core.grid_tensor import GridGeometry
from rhflow.utils.cache import LRUCache, array_key
from rhflow.utils.error_handler import (
    EXIT_CONFIG, EXIT_FAILURE, EXIT_MONITOR_FAIL, ConfigError, ConvergenceError, ErrorHandler, MonitorFailure,
)
from rhflow.utils.metrics import MetricsManager


@pytest.fixture
def handler():
    return ErrorHandler(logging.getLogger('rhflow.test'))


def test_result_ok_and_err(result):
    assert result.ok(3).unwrap() == 3
    failed = result.err("step rejected", hint=0.5)
    assert not failed.success
    assert failed.hint == 0.5
    with pytest.raises(ValueError, match='step rejected'):
        failed.unwrap()


def test_exit_codes(handler):
    assert handler.handle_command_error(ConfigError('time.dt', "must be positive"), 'run') == EXIT_CONFIG
    assert handler.handle_command_error(MonitorFailure(['bochner']), 'verify') == EXIT_MONITOR_FAIL
    assert handler.handle_command_error(ConvergenceError("no fixed point", 1e-3), 'run') == EXIT_FAILURE

    stats = handler.get_error_stats('run')
    assert stats['total_errors'] == 2
    assert stats['errors_by_type'] == {'ConfigError': 1, 'ConvergenceError': 1}
    handler.clear_error_history()
    assert handler.get_error_stats()['total_errors'] == 0


def test_config_error_names_key():
    error = ConfigError('grid.nodes', "must be at least 8")
    assert error.key == 'grid.nodes'
    assert 'grid.nodes' in str(error)


def test_lru_eviction_and_metrics():
    cache = LRUCache(max_size=2)
    cache.put('a', 1)
    cache.put('b', 2)
    assert cache.get('a') == 1
    cache.put('c', 3)
    assert cache.get('b') is None
    assert cache.get_or_compute('c', lambda: pytest.fail("recomputed")) == 3
    metrics = cache.get_metrics()
    assert metrics['size'] == 2
    assert (metrics['hits'], metrics['misses']) == (2, 1)


def test_array_key_sees_values_and_shape():
    a = np.zeros((4, 4))
    assert array_key(GridGeometry(2, 16), a) == array_key(GridGeometry(2, 16), a.copy())
    assert array_key(GridGeometry(2, 16), a) != array_key(GridGeometry(2, 32), a)
    assert array_key(a) != array_key(a.reshape(2, 8))
    b = a.copy()
    b[1, 1] = 1e-300
    assert array_key(a) != array_key(b)


def test_metrics_report():
    metrics = MetricsManager()
    metrics.track_phase('run', 0.5)
    metrics.track_phase('run', 1.5)
    metrics.track_solver('lambda', 12)
    metrics.track_step(True)
    metrics.track_step(False)
    metrics.track_error('DegenerateMetricError')
    report = metrics.get_metrics_report()
    assert report['phases']['run']['avg'] == 1.0
    assert report['phases']['run']['count'] == 2
    assert report['solvers']['lambda'] == {'calls': 1, 'avg_iterations': 12.0, 'max_iterations': 12}
    assert report['stepping'] == {'accepted': 1, 'rejected': 1}
    assert report['error_statistics']['total_errors'] == 1
    metrics.reset_metrics()
    assert metrics.get_metrics_report()['phases'] == {}
