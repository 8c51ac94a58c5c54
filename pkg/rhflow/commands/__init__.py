"""
Command handlers behind the rhflow CLI
"""

from .run import RunCommand, RunOutcome
from .analysis import AnalysisCommands
from .verify import VerifyCommand

__all__ = ['RunCommand', 'RunOutcome', 'AnalysisCommands', 'VerifyCommand']
