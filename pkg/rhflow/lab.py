"""
rhflow - laboratory orchestrator
"""

import logging
import os
import time
from typing import Callable, Dict, Optional

from .commands.analysis import AnalysisCommands
from .commands.run import RunCommand
from .commands.verify import VerifyCommand
from .core.config import Config, RunConfig
from .core.outputs import ArtifactWriter, write_json
from .utils.cache import LRUCache
from .utils.error_handler import ErrorHandler
from .utils.metrics import MetricsManager

COMMANDS = ('run', 'verify', 'functionals', 'reduced-volume')


class RHFlowLab:
    """Runs one command against a loaded configuration and records its metrics."""

    def __init__(self, config: Config, out_dir: Optional[str] = None):
        self.config = config
        self.run_config: RunConfig = config.run
        self.out_dir = out_dir
        self.logger = logging.getLogger(__name__)
        self._init_components()

    def _init_components(self) -> None:
        """Initialize metrics, cache, error handling and the command table."""
        try:
            self.metrics = MetricsManager()
            self.cache = LRUCache(max_size=64)
            self.error_handler = ErrorHandler(self.logger)
            self.threads = self.run_config.threads

            self.run_command = RunCommand(self)
            analysis = AnalysisCommands(self)
            self.commands: Dict[str, Callable[[RunConfig], int]] = {
                'run': self.run_command,
                'verify': VerifyCommand(self),
                'functionals': analysis.functionals,
                'reduced-volume': analysis.reduced_volume,
            }
        except Exception as e:
            self.logger.critical(f"Failed to initialize components: {e}")
            raise

    def writer(self, config: RunConfig) -> ArtifactWriter:
        return ArtifactWriter(self.out_dir or config.output.dir)

    def dispatch(self, name: str) -> int:
        """Run a command; every exception becomes an exit code and metrics.json is always written."""
        if name not in self.commands:
            raise ValueError(f"unknown command '{name}', expected one of {list(COMMANDS)}")
        self.logger.info(f"Starting '{name}' (scenario={self.run_config.scenario}, seed={self.run_config.seed})")
        started = time.perf_counter()
        try:
            code = self.commands[name](self.run_config)
        except Exception as e:
            self.metrics.track_error(type(e).__name__)
            code = self.error_handler.handle_command_error(e, name)
        finally:
            self.metrics.track_phase(name, time.perf_counter() - started)
            self.metrics.update_cache_stats(self.cache.get_metrics())
            out = self.out_dir or self.run_config.output.dir
            os.makedirs(out, exist_ok=True)
            write_json(os.path.join(out, 'metrics.json'), self.metrics.get_metrics_report())
        self.logger.info(f"'{name}' finished with exit code {code}")
        return code
