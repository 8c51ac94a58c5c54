# rhflow/__init__.py
"""
rhflow - numerical laboratory for the coupled Ricci / harmonic-map heat flow
"""

__version__ = '0.1.0'

from .core.config import Config, RunConfig, parse_config
from .lab import RHFlowLab

__all__ = ['Config', 'RunConfig', 'parse_config', 'RHFlowLab']
