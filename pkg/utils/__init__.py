# utils/__init__.py
"""Result analysis and multi-agent comparison helpers."""

from .analytics import ExperimentAnalytics
from .comparison import AgentComparison

__all__ = [
    'ExperimentAnalytics',
    'AgentComparison'
]
