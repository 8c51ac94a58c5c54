"""
Core numerics of rhflow: grid tensors, flows, functionals, monitors and I/O
"""

from .config import Config, RunConfig, parse_config
from .grid_tensor import GridGeometry, TargetSpec
from .trajectory import CouplingSchedule, DiagnosticSeries, SingularityReport
from .homogeneous import HomTrajectory, HomogeneousState, ModelFamily, ModelKind, integrate_model
from .deturck import FlowState, Trajectory
from .reports import CheckResult, FunctionalReport, MonitorReport, Verdict
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    'Config',
    'RunConfig',
    'parse_config',
    'GridGeometry',
    'TargetSpec',
    'CouplingSchedule',
    'DiagnosticSeries',
    'SingularityReport',
    'HomTrajectory',
    'HomogeneousState',
    'ModelFamily',
    'ModelKind',
    'integrate_model',
    'FlowState',
    'Trajectory',
    'CheckResult',
    'FunctionalReport',
    'MonitorReport',
    'Verdict',
    'Checkpoint',
    'load_checkpoint',
    'save_checkpoint',
]
