"""Adaptive-gradient disturbance response control for partially observed LTI systems."""

from . import adversary, learner, lti, oco, policy, regret, truncated
from .learner import ConfigurationError
from .lti import BoundedNoiseSpec, SystemModel

__all__ = [
    "adversary", "learner", "lti", "oco", "policy", "regret", "truncated",
    "BoundedNoiseSpec", "ConfigurationError", "SystemModel",
]
__version__ = "0.1.0"
