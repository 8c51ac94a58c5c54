"""
The `run` command: integrate a homogeneous model or a grid field, then emit
the CSV series, monitor and functional reports, and checkpoints.
"""

import logging
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

from ..core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..core.config import RunConfig
from ..core.deturck import FlowState, Trajectory, cfl_dt, run as run_grid
from ..core.functionals import monotonicity_series
from ..core.homogeneous import HomTrajectory, breather_scan, integrate_model
from ..core.initial_data import build_initial
from ..core.monitors import monitor_suite
from ..core.outputs import ArtifactWriter, series_rows
from ..core.reports import FunctionalReport, MonitorReport
from ..utils.error_handler import (
    EXIT_MONITOR_FAIL, EXIT_OK, EXIT_SINGULARITY, CheckpointError, ConfigError,
)

if TYPE_CHECKING:
    from ..lab import RHFlowLab

logger = logging.getLogger(__name__)

HOMOGENEOUS_DT = 1e-3

AnyTrajectory = Union[Trajectory, HomTrajectory]


@dataclass
class RunOutcome:
    trajectory: AnyTrajectory
    monitors: Optional[MonitorReport] = None
    functionals: Optional[FunctionalReport] = None

    @property
    def exit_code(self) -> int:
        failed = (self.monitors is not None and not self.monitors.ok) or \
                 (self.functionals is not None and not self.functionals.ok)
        if failed:
            return EXIT_MONITOR_FAIL
        if self.trajectory.singularity is not None:
            return EXIT_SINGULARITY
        return EXIT_OK


class RunCommand:
    """Integration and artifact emission for one configuration."""

    def __init__(self, lab: 'RHFlowLab'):
        self.lab = lab

    def _checkpoint_path(self, writer: ArtifactWriter, config: RunConfig, index: int) -> str:
        return os.path.join(writer.checkpoint_dir(config.output.checkpoint_dir), f"ckpt_{index:06d}.rhfc")

    def integrate_homogeneous(self, config: RunConfig,
                              writer: Optional[ArtifactWriter] = None) -> HomTrajectory:
        model = config.model.kind()
        schedule = config.coupling.schedule()
        dt = config.time.dt if config.time.dt is not None else HOMOGENEOUS_DT
        c0, d0, t_start, step0 = config.model.c0, config.model.d0, 0.0, 0
        if config.time.resume:
            checkpoint = load_checkpoint(config.time.resume)
            state, stored = checkpoint.to_hom_state()
            if stored != model:
                raise CheckpointError(f"checkpoint model {stored} does not match configured model {model}")
            c0, d0, t_start, step0, dt = state.c, state.d, state.t, checkpoint.step, checkpoint.dt
            schedule = checkpoint.schedule()
        traj = integrate_model(model, schedule, config.time.t_end, dt, c0, d0,
                               config.time.sample_stride, t_start=t_start)
        every = config.time.checkpoint_every
        if writer is not None and every > 0:
            for index, state in enumerate(traj.samples):
                if index % every == 0 or index == len(traj.samples) - 1:
                    step = step0 + int(round((state.t - t_start) / dt))
                    save_checkpoint(Checkpoint.from_hom_state(state, model, schedule, dt, step),
                                    self._checkpoint_path(writer, config, index))
        return traj

    def integrate_grid(self, config: RunConfig, writer: Optional[ArtifactWriter] = None) -> Trajectory:
        schedule = config.coupling.schedule()
        if config.time.resume:
            checkpoint = load_checkpoint(config.time.resume)
            initial = checkpoint.to_flow_state()
            dt = checkpoint.dt
            schedule = checkpoint.schedule()
        else:
            geom = config.grid.geometry()
            target = config.target.spec()
            g, phi = build_initial(geom, target, config.initial.metric, config.initial.metric_amplitude,
                                   config.initial.map, config.initial.map_amplitude, config.seed)
            initial = FlowState(0.0, g, target.project(phi), geom, target)
            dt = config.time.dt if config.time.dt is not None else cfl_dt(geom, g, config.time.cfl_safety)

        on_sample = None
        every = config.time.checkpoint_every
        if writer is not None and every > 0:
            def on_sample(state: FlowState, index: int) -> None:
                if index % every == 0:
                    save_checkpoint(Checkpoint.from_flow_state(state, schedule, dt),
                                    self._checkpoint_path(writer, config, index))

        traj = run_grid(initial, schedule, config.time.t_end, dt, config.time.sample_stride,
                        config.time.rm_threshold, config.time.energy_threshold, on_sample,
                        metrics=self.lab.metrics, cache=self.lab.cache)
        if writer is not None and every > 0:
            save_checkpoint(Checkpoint.from_flow_state(traj.final, schedule, dt),
                            self._checkpoint_path(writer, config, len(traj.samples) - 1))
        return traj

    def integrate(self, config: RunConfig, writer: Optional[ArtifactWriter] = None) -> AnyTrajectory:
        if config.model.geometry == 'homogeneous':
            return self.integrate_homogeneous(config, writer)
        if config.model.geometry == 'grid':
            return self.integrate_grid(config, writer)
        raise ConfigError('model.geometry', f"unknown geometry '{config.model.geometry}'")

    def execute(self, config: RunConfig) -> RunOutcome:
        writer = self.lab.writer(config)
        writer.resolved_config(config)
        traj = self.integrate(config, writer)
        outcome = RunOutcome(traj)

        if config.functionals.enabled:
            outcome.functionals = monotonicity_series(
                traj, tau_horizon=config.functionals.tau_horizon, tolerance=config.functionals.tolerance,
                max_samples=config.functionals.max_samples, threads=self.lab.threads,
                adjoint=config.functionals.adjoint, seed=config.seed, metrics=self.lab.metrics)

        # series and singularity go out before the monitors so a failing check still leaves them
        writer.csv(config.output.csv, series_rows(traj, outcome.functionals))
        if traj.singularity is not None:
            writer.json('singularity.json', traj.singularity.to_dict())
        if outcome.functionals is not None:
            writer.json('functional_report.json', outcome.functionals.to_dict())
        if isinstance(traj, HomTrajectory) and traj.model.normalized and len(traj.samples) >= 2:
            writer.json('breathers.json', breather_scan(traj).to_dict())

        if config.monitors.enabled:
            outcome.monitors = monitor_suite(traj, tolerance=config.monitors.tolerance, cache=self.lab.cache)
            writer.json('monitor_report.json', outcome.monitors.to_dict())
        return outcome

    def __call__(self, config: RunConfig) -> int:
        outcome = self.execute(config)
        traj = outcome.trajectory
        if traj.singularity is not None:
            logger.info(f"Singularity at t={traj.singularity.t:.10g} ({traj.singularity.reason})")
        if outcome.monitors is not None and not outcome.monitors.ok:
            logger.error(f"Monitor checks failed: {', '.join(outcome.monitors.failed)}")
        if outcome.functionals is not None and not outcome.functionals.ok:
            logger.error(f"Functional checks failed: {', '.join(outcome.functionals.checks.failed)}")
        return outcome.exit_code
