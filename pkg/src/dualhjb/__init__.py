"""Smooth value functions and feedback controls for cone-constrained utility
maximization with nonsmooth utilities, computed through the convex dual."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapabilityError,
    ConfigError,
    DomainError,
    DualHJBError,
    RangeError,
    SimulationError,
    SolverError,
)
from .utility import *  # noqa: E402,F401,F403
from .market import *  # noqa: E402,F401,F403
from .dual import *  # noqa: E402,F401,F403
from .primal import *  # noqa: E402,F401,F403
from .simulation import *  # noqa: E402,F401,F403
from .applications import *  # noqa: E402,F401,F403
from .config import *  # noqa: E402,F401,F403
