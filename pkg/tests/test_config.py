import json

import pytest
import yaml

from rhflow.core.config import Config, RunConfig, parse_config, write_resolved
from rhflow.core.homogeneous import ModelFamily
from rhflow.utils.error_handler import ConfigError


def test_loads_test_config(config):
    run = config.run
    assert run.scenario == 'homogeneous'
    assert run.model.geometry == 'homogeneous'
    assert run.coupling.schedule()(0.3) == 0.5
    assert run.time.dt == 0.001
    assert config.get('seed') == 3
    assert config.get('log_level') == 'DEBUG'


def test_defaults_fill_missing_sections():
    run = RunConfig.from_mapping({})
    assert run.grid.nodes == 32
    assert run.target.embedding_dim == 3
    assert run.reduced_volume.taus == (0.1, 0.2, 0.3, 0.4)
    assert run.model.kind().family == ModelFamily.SPHERE2


def test_pde_scenario_resolves_to_grid_and_flat_embedding():
    run = RunConfig.from_mapping({'scenario': 'pde', 'target': {'kind': 'flat'}, 'initial': {'map': 'scalar-wave'}})
    assert run.model.geometry == 'grid'
    assert run.target.spec().embedding_dim == 1


@pytest.mark.parametrize('doc, key', [
    ({'coupling': {'value': -0.5}}, 'coupling.value'),
    ({'bogus': 1}, 'bogus'),
    ({'grid': {'nodes': 4}}, 'grid.nodes'),
    ({'grid': {'nodes': True}}, 'grid.nodes'),
    ({'time': {'t_end': 'soon'}}, 'time.t_end'),
    ({'model': {'family': 'torus'}}, 'model.family'),
    ({'scenario': 'pde', 'model': {'geometry': 'homogeneous'}}, 'model.geometry'),
    ({'model': {'family': 'product', 'normalized': True, 'c0': 2.0}}, 'model.c0'),
    ({'reduced_volume': {'segments': 8}}, 'reduced_volume.segments'),
    ({'seed': None}, 'seed'),
])
def test_invalid_values_name_the_key(doc, key):
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_mapping(doc)
    assert excinfo.value.key == key


def test_increasing_schedule_is_rejected_unless_allowed():
    doc = {'coupling': {'kind': 'piecewise-linear', 'times': [0.0, 1.0], 'values': [0.5, 1.0]}}
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_mapping(doc)
    assert 'non-increasing' in str(excinfo.value)

    doc['coupling']['require_non_increasing'] = False
    schedule = RunConfig.from_mapping(doc).coupling.schedule()
    assert not schedule.is_non_increasing
    assert schedule(0.5) == pytest.approx(0.75)


def test_json_file_and_overrides(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'scenario': 'verify', 'verify': {'refine': 2}}))
    run = parse_config(str(path), {'verify.refine': 3, 'output.dir': str(tmp_path / 'out')})
    assert run.verify.refine == 3
    assert run.output.dir == str(tmp_path / 'out')


def test_environment_overrides_top_level_keys(tmp_path, monkeypatch):
    path = tmp_path / 'run.yaml'
    path.write_text("seed: 1\n")
    monkeypatch.setenv('RHFLOW_SEED', '42')
    assert Config(str(path)).run.seed == 42


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError) as missing:
        Config(str(tmp_path / 'absent.yaml'))
    assert missing.value.key == '<file>'

    bad = tmp_path / 'bad.yaml'
    bad.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        Config(str(bad))

    scalar = tmp_path / 'scalar.yaml'
    scalar.write_text("42\n")
    with pytest.raises(ConfigError) as root:
        Config(str(scalar))
    assert root.value.key == '<root>'


def test_resolved_config_round_trips(tmp_path, config):
    path = tmp_path / 'resolved_config.yaml'
    write_resolved(config.run, str(path))
    doc = yaml.safe_load(path.read_text())
    assert RunConfig.from_mapping(doc) == config.run
