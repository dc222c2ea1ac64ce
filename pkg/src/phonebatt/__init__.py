"""Smartphone battery time-to-empty as a stochastic hybrid system."""
from ._jit import HAS_NUMBA
from .battery import AgingParams, BatteryParams, BatteryState, EntropicMap
from .engine import SimScenario, run_monte_carlo, run_trajectory
from .usage import CtmcSpec, ModeSpec, Multipliers, UsageModel

__version__ = "0.1.0"

__all__ = [
    "HAS_NUMBA",
    "AgingParams",
    "BatteryParams",
    "BatteryState",
    "EntropicMap",
    "SimScenario",
    "run_monte_carlo",
    "run_trajectory",
    "CtmcSpec",
    "ModeSpec",
    "Multipliers",
    "UsageModel",
]
