"""
Run configuration: YAML/JSON loading, environment overrides and schema validation.
"""

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from ..utils.error_handler import ConfigError
from .grid_tensor import GridGeometry, TargetSpec
from .homogeneous import ModelFamily, ModelKind
from .initial_data import MAPS, METRICS
from .trajectory import CouplingSchedule

logger = logging.getLogger(__name__)

ENV_PREFIX = 'RHFLOW_'
SCENARIOS = ('homogeneous', 'pde', 'functionals', 'reduced-volume', 'verify')
SUITES = ('all', 'gauge', 'evolution', 'bochner', 'curvature')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')
GEOMETRIES = ('homogeneous', 'grid')
_SCENARIO_GEOMETRY = {'homogeneous': 'homogeneous', 'pde': 'grid'}

DEFAULTS: Dict[str, Any] = {
    'scenario': 'homogeneous',
    'seed': 0,
    'threads': 1,
    'log_level': 'INFO',
    'log_file': 'rhflow.log',
    'model': {
        'geometry': None,
        'family': 'sphere2',
        'normalized': False,
        'flow': 'rh',
        'c0': 1.0,
        'd0': 1.0,
        'base_volume': 1.0,
    },
    'grid': {
        'dim': 2,
        'nodes': 32,
        'period': 2 * math.pi,
    },
    'target': {
        'kind': 'sphere',
        'radius': 1.0,
        'embedding_dim': None,
    },
    'initial': {
        'metric': 'bump',
        'metric_amplitude': 0.05,
        'map': 'perturbed-equator',
        'map_amplitude': 0.2,
    },
    'coupling': {
        'kind': 'constant',
        'value': 1.0,
        'times': [],
        'values': [],
        'require_non_increasing': True,
    },
    'time': {
        't_end': 1.0,
        'dt': None,
        'cfl_safety': 0.2,
        'sample_stride': 1,
        'checkpoint_every': 0,
        'resume': None,
        'rm_threshold': 1e6,
        'energy_threshold': 1e6,
    },
    'functionals': {
        'enabled': False,
        'tau_horizon': None,
        'max_samples': 10,
        'adjoint': False,
        'tolerance': 1e-6,
    },
    'monitors': {
        'enabled': True,
        'tolerance': None,
    },
    'reduced_volume': {
        'taus': [0.1, 0.2, 0.3, 0.4],
        't0': None,
        'base': None,
        'segments': 32,
        'starts': 5,
        'endpoint_stride': 1,
        'tolerance': 1e-4,
    },
    'verify': {
        'suite': 'all',
        'refine': 2,
        'nodes': 32,
        'alpha': 1.0,
        'fixtures': 3,
    },
    'output': {
        'dir': 'out',
        'csv': 'series.csv',
        'checkpoint_dir': 'checkpoints',
    },
}

# expected types per dotted key; None in a default means the value is optional
_FLOAT = (int, float)
TYPES: Dict[str, Tuple[type, ...]] = {
    'scenario': (str,), 'seed': (int,), 'threads': (int,), 'log_level': (str,), 'log_file': (str,),
    'model.geometry': (str,), 'model.family': (str,), 'model.normalized': (bool,), 'model.flow': (str,),
    'model.c0': _FLOAT, 'model.d0': _FLOAT, 'model.base_volume': _FLOAT,
    'grid.dim': (int,), 'grid.nodes': (int,), 'grid.period': _FLOAT,
    'target.kind': (str,), 'target.radius': _FLOAT, 'target.embedding_dim': (int,),
    'initial.metric': (str,), 'initial.metric_amplitude': _FLOAT,
    'initial.map': (str,), 'initial.map_amplitude': _FLOAT,
    'coupling.kind': (str,), 'coupling.value': _FLOAT, 'coupling.times': (list,), 'coupling.values': (list,),
    'coupling.require_non_increasing': (bool,),
    'time.t_end': _FLOAT, 'time.dt': _FLOAT, 'time.cfl_safety': _FLOAT, 'time.sample_stride': (int,),
    'time.checkpoint_every': (int,), 'time.resume': (str,),
    'time.rm_threshold': _FLOAT, 'time.energy_threshold': _FLOAT,
    'functionals.enabled': (bool,), 'functionals.tau_horizon': _FLOAT, 'functionals.max_samples': (int,),
    'functionals.adjoint': (bool,), 'functionals.tolerance': _FLOAT,
    'monitors.enabled': (bool,), 'monitors.tolerance': _FLOAT,
    'reduced_volume.taus': (list,), 'reduced_volume.t0': _FLOAT, 'reduced_volume.base': (list,),
    'reduced_volume.segments': (int,), 'reduced_volume.starts': (int,), 'reduced_volume.endpoint_stride': (int,),
    'reduced_volume.tolerance': _FLOAT,
    'verify.suite': (str,), 'verify.refine': (int,), 'verify.nodes': (int,), 'verify.alpha': _FLOAT,
    'verify.fixtures': (int,),
    'output.dir': (str,), 'output.csv': (str,), 'output.checkpoint_dir': (str,),
}


def _require(ok: bool, key: str, constraint: str) -> None:
    if not ok:
        raise ConfigError(key, constraint)


def _merge(defaults: Dict[str, Any], doc: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Overlay doc on defaults, rejecting keys the schema does not know."""
    merged = copy.deepcopy(defaults)
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict):
            _require(isinstance(value, dict), path, "must be a mapping")
            merged[key] = _merge(defaults[key], value, f"{path}.")
        else:
            merged[key] = value
    return merged


def _check_types(doc: Dict[str, Any]) -> None:
    for path, types in TYPES.items():
        section, _, key = path.rpartition('.')
        value = doc[section][key] if section else doc[key]
        if value is None:
            default = DEFAULTS[section][key] if section else DEFAULTS[key]
            _require(default is None, path, "must not be null")
            continue
        # bool is an int subclass; only accept it where a bool is expected
        ok = isinstance(value, types) and (bool in types or not isinstance(value, bool))
        _require(ok, path, f"expected {' or '.join(t.__name__ for t in types)}, got {type(value).__name__}")


def _validate_values(doc: Dict[str, Any]) -> None:
    _require(doc['scenario'] in SCENARIOS, 'scenario', f"must be one of {list(SCENARIOS)}")
    _require(doc['threads'] >= 1, 'threads', "must be at least 1")
    _require(doc['log_level'].upper() in LOG_LEVELS, 'log_level', f"must be one of {list(LOG_LEVELS)}")

    model = doc['model']
    if model['geometry'] is not None:
        _require(model['geometry'] in GEOMETRIES, 'model.geometry', f"must be one of {list(GEOMETRIES)}")
        implied = _SCENARIO_GEOMETRY.get(doc['scenario'])
        _require(implied is None or implied == model['geometry'], 'model.geometry',
                 f"scenario '{doc['scenario']}' runs on the {implied} model")
    families = [f.value for f in ModelFamily]
    _require(model['family'] in families, 'model.family', f"must be one of {families}")
    _require(model['flow'] in ('rh', 'ricci'), 'model.flow', "must be 'rh' or 'ricci'")
    for key in ('c0', 'd0', 'base_volume'):
        _require(model[key] > 0, f'model.{key}', "must be positive")
    if model['normalized'] and model['family'] == 'product':
        volume = model['c0'] * model['d0'] * model['base_volume']
        _require(abs(volume - 1.0) <= 1e-12, 'model.c0',
                 "normalized product runs must start on the unit-volume slice c0·d0·base_volume = 1")

    grid = doc['grid']
    _require(grid['dim'] in (1, 2), 'grid.dim', "must be 1 or 2")
    _require(grid['nodes'] >= 8, 'grid.nodes', "must be at least 8")
    _require(grid['period'] > 0, 'grid.period', "must be positive")

    target = doc['target']
    _require(target['kind'] in ('flat', 'sphere'), 'target.kind', "must be 'flat' or 'sphere'")
    _require(target['radius'] > 0, 'target.radius', "must be positive")
    if target['embedding_dim'] is not None:
        expected_ok = target['embedding_dim'] == 1 if target['kind'] == 'flat' else target['embedding_dim'] >= 2
        _require(expected_ok, 'target.embedding_dim',
                 "must be 1 for flat targets and at least 2 for spheres")

    initial = doc['initial']
    _require(initial['metric'] in METRICS, 'initial.metric', f"must be one of {sorted(METRICS)}")
    _require(initial['map'] in MAPS, 'initial.map', f"must be one of {sorted(MAPS)}")

    coupling = doc['coupling']
    _require(coupling['kind'] in ('constant', 'piecewise-linear'), 'coupling.kind',
             "must be 'constant' or 'piecewise-linear'")
    if coupling['kind'] == 'constant':
        _require(coupling['value'] >= 0, 'coupling.value', "coupling must be non-negative")
    else:
        times, values = coupling['times'], coupling['values']
        _require(len(times) >= 2 and len(times) == len(values), 'coupling.times',
                 "needs at least two knots and one value per knot")
        _require(all(isinstance(v, _FLOAT) and not isinstance(v, bool) for v in times + values),
                 'coupling.values', "knots must be numbers")
        _require(all(b > a for a, b in zip(times, times[1:])), 'coupling.times', "must be strictly increasing")
        _require(all(v >= 0 for v in values), 'coupling.values', "coupling must be non-negative")
        if coupling['require_non_increasing']:
            _require(all(b <= a for a, b in zip(values, values[1:])), 'coupling.values',
                     "must be non-increasing: the monotonicity statements need a non-increasing coupling "
                     "(set coupling.require_non_increasing to false to run anyway)")

    t = doc['time']
    _require(t['t_end'] > 0, 'time.t_end', "must be positive")
    _require(t['dt'] is None or t['dt'] > 0, 'time.dt', "must be positive")
    _require(0 < t['cfl_safety'] <= 1, 'time.cfl_safety', "must lie in (0, 1]")
    _require(t['sample_stride'] >= 1, 'time.sample_stride', "must be at least 1")
    _require(t['checkpoint_every'] >= 0, 'time.checkpoint_every', "must be non-negative")

    f = doc['functionals']
    _require(f['max_samples'] >= 3, 'functionals.max_samples', "must be at least 3")
    _require(f['tau_horizon'] is None or f['tau_horizon'] > 0, 'functionals.tau_horizon', "must be positive")

    rv = doc['reduced_volume']
    taus = rv['taus']
    _require(len(taus) >= 2 and all(isinstance(x, _FLOAT) and x > 0 for x in taus), 'reduced_volume.taus',
             "needs at least two positive values")
    _require(rv['segments'] >= 16, 'reduced_volume.segments', "must be at least 16")
    _require(rv['starts'] >= 1, 'reduced_volume.starts', "must be at least 1")
    _require(rv['endpoint_stride'] >= 1, 'reduced_volume.endpoint_stride', "must be at least 1")

    v = doc['verify']
    _require(v['suite'] in SUITES, 'verify.suite', f"must be one of {list(SUITES)}")
    _require(v['refine'] >= 2, 'verify.refine', "must be at least 2")
    _require(v['nodes'] >= 8, 'verify.nodes', "must be at least 8")
    _require(v['alpha'] >= 0, 'verify.alpha', "coupling must be non-negative")
    _require(v['fixtures'] >= 1, 'verify.fixtures', "must be at least 1")


@dataclass(frozen=True)
class ModelConfig:
    geometry: str
    family: str
    normalized: bool
    flow: str
    c0: float
    d0: float
    base_volume: float

    def kind(self) -> ModelKind:
        return ModelKind(ModelFamily(self.family), self.normalized, self.flow, self.base_volume)


@dataclass(frozen=True)
class GridConfig:
    dim: int
    nodes: int
    period: float

    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dim, self.nodes, self.period)


@dataclass(frozen=True)
class TargetConfig:
    kind: str
    radius: float
    embedding_dim: int

    def spec(self) -> TargetSpec:
        return TargetSpec(self.kind, self.radius, self.embedding_dim)


@dataclass(frozen=True)
class InitialConfig:
    metric: str
    metric_amplitude: float
    map: str
    map_amplitude: float


@dataclass(frozen=True)
class CouplingConfig:
    kind: str
    value: float
    times: Tuple[float, ...]
    values: Tuple[float, ...]
    require_non_increasing: bool

    def schedule(self) -> CouplingSchedule:
        if self.kind == 'constant':
            return CouplingSchedule.constant(self.value)
        return CouplingSchedule.piecewise_linear(self.times, self.values)


@dataclass(frozen=True)
class TimeConfig:
    t_end: float
    dt: Optional[float]
    cfl_safety: float
    sample_stride: int
    checkpoint_every: int
    resume: Optional[str]
    rm_threshold: float
    energy_threshold: float


@dataclass(frozen=True)
class FunctionalsConfig:
    enabled: bool
    tau_horizon: Optional[float]
    max_samples: int
    adjoint: bool
    tolerance: float


@dataclass(frozen=True)
class MonitorsConfig:
    enabled: bool
    tolerance: Optional[float]


@dataclass(frozen=True)
class ReducedVolumeConfig:
    taus: Tuple[float, ...]
    t0: Optional[float]
    base: Optional[Tuple[float, ...]]
    segments: int
    starts: int
    endpoint_stride: int
    tolerance: float


@dataclass(frozen=True)
class VerifyConfig:
    suite: str
    refine: int
    nodes: int
    alpha: float
    fixtures: int


@dataclass(frozen=True)
class OutputConfig:
    dir: str
    csv: str
    checkpoint_dir: str


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default made explicit."""
    scenario: str
    seed: int
    threads: int
    log_level: str
    log_file: str
    model: ModelConfig
    grid: GridConfig
    target: TargetConfig
    initial: InitialConfig
    coupling: CouplingConfig
    time: TimeConfig
    functionals: FunctionalsConfig
    monitors: MonitorsConfig
    reduced_volume: ReducedVolumeConfig
    verify: VerifyConfig
    output: OutputConfig
    source: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_mapping(cls, doc: Optional[Dict[str, Any]], source: Optional[str] = None) -> 'RunConfig':
        doc = doc or {}
        _require(isinstance(doc, dict), '<root>', "configuration must be a mapping")
        merged = _merge(DEFAULTS, doc)
        _check_types(merged)
        _validate_values(merged)
        if merged['model']['geometry'] is None:
            merged['model']['geometry'] = _SCENARIO_GEOMETRY.get(merged['scenario'], 'grid')
        if merged['target']['embedding_dim'] is None:
            merged['target']['embedding_dim'] = 1 if merged['target']['kind'] == 'flat' else 3

        def floats(values):
            return tuple(float(v) for v in values)

        c = merged['coupling']
        rv = merged['reduced_volume']
        t = merged['time']
        fn = merged['functionals']
        mon = merged['monitors']
        return cls(
            scenario=merged['scenario'],
            seed=merged['seed'],
            threads=merged['threads'],
            log_level=merged['log_level'].upper(),
            log_file=merged['log_file'],
            model=ModelConfig(**{**merged['model'], 'c0': float(merged['model']['c0']),
                                 'd0': float(merged['model']['d0']),
                                 'base_volume': float(merged['model']['base_volume'])}),
            grid=GridConfig(merged['grid']['dim'], merged['grid']['nodes'], float(merged['grid']['period'])),
            target=TargetConfig(merged['target']['kind'], float(merged['target']['radius']),
                                merged['target']['embedding_dim']),
            initial=InitialConfig(merged['initial']['metric'], float(merged['initial']['metric_amplitude']),
                                  merged['initial']['map'], float(merged['initial']['map_amplitude'])),
            coupling=CouplingConfig(c['kind'], float(c['value']), floats(c['times']), floats(c['values']),
                                    c['require_non_increasing']),
            time=TimeConfig(float(t['t_end']), None if t['dt'] is None else float(t['dt']),
                            float(t['cfl_safety']), t['sample_stride'], t['checkpoint_every'], t['resume'],
                            float(t['rm_threshold']), float(t['energy_threshold'])),
            functionals=FunctionalsConfig(fn['enabled'],
                                          None if fn['tau_horizon'] is None else float(fn['tau_horizon']),
                                          fn['max_samples'], fn['adjoint'], float(fn['tolerance'])),
            monitors=MonitorsConfig(mon['enabled'], None if mon['tolerance'] is None else float(mon['tolerance'])),
            reduced_volume=ReducedVolumeConfig(floats(rv['taus']),
                                               None if rv['t0'] is None else float(rv['t0']),
                                               None if rv['base'] is None else floats(rv['base']),
                                               rv['segments'], rv['starts'], rv['endpoint_stride'],
                                               float(rv['tolerance'])),
            verify=VerifyConfig(**{**merged['verify'], 'alpha': float(merged['verify']['alpha'])}),
            output=OutputConfig(**merged['output']),
            source=source,
        )

    def resolved(self) -> Dict[str, Any]:
        """Plain mapping of the full configuration, suitable for yaml.safe_dump."""
        out = asdict(self)
        out.pop('source')

        def plain(value):
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        return plain(out)


class Config:
    """Configuration loaded from a YAML or JSON file with RHFLOW_ environment overrides."""

    def __init__(self, config_path: Optional[str] = 'config.yaml', overrides: Optional[Dict[str, Any]] = None):
        self.config_path = config_path
        self.config: Dict[str, Any] = {}
        self.overrides = overrides or {}
        self.run: Optional[RunConfig] = None
        self._load_config()

    def _load_config(self) -> None:
        """Load the document, apply environment overrides and validate."""
        doc: Dict[str, Any] = {}
        if self.config_path is not None:
            try:
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    doc = yaml.safe_load(f) or {}
            except OSError as e:
                raise ConfigError('<file>', f"cannot read {self.config_path}: {e.strerror}") from e
            except yaml.YAMLError as e:
                raise ConfigError('<file>', f"not well-formed YAML/JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError('<root>', "configuration must be a mapping")

        for key, default in DEFAULTS.items():
            if isinstance(default, dict):
                continue
            env_value = os.getenv(f'{ENV_PREFIX}{key.upper()}')
            if env_value:
                doc[key] = yaml.safe_load(env_value)
                logger.debug(f"Environment override for '{key}'")
        for key, value in self.overrides.items():
            section, _, name = key.rpartition('.')
            target = doc.setdefault(section, {}) if section else doc
            target[name] = value

        self.config = doc
        self._validate_config()

    def _validate_config(self) -> None:
        self.run = RunConfig.from_mapping(self.config, self.config_path)

    def get(self, key: str, default: Any = None) -> Any:
        """Value of a top-level key of the resolved configuration."""
        return self.run.resolved().get(key, default)


def parse_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    return Config(path, overrides).run


def write_resolved(config: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.resolved(), f, default_flow_style=False, sort_keys=True)
