"""Desk-scale environments."""

from .base import CmdpEnv, EpisodicEnv
from .circuit import CircuitConfig, CircuitWorld, grid_circuit
from .gather import GatherConfig, GatherWorld, grid_gather
from .jam import JamConfig, JamEnv, JamState, JamWorld, relative_model
from .layout import LayoutError, parse_layout
from .random import random_cmdp
from .traps import deep_trap


def grid_jam(config: JamConfig = JamConfig()) -> JamWorld:
    return JamWorld(config)


__all__ = [
    "CircuitConfig",
    "CircuitWorld",
    "CmdpEnv",
    "EpisodicEnv",
    "GatherConfig",
    "GatherWorld",
    "JamConfig",
    "JamEnv",
    "JamState",
    "JamWorld",
    "LayoutError",
    "deep_trap",
    "grid_circuit",
    "grid_gather",
    "grid_jam",
    "parse_layout",
    "random_cmdp",
    "relative_model",
]
