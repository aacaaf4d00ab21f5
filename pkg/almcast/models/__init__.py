"""
Domain models: scenarios, strategies, measurements and configuration.
"""

from .config import McastConfig
from .measurement import Assignment, LatencySample, MeasurementReport, SampleStatus
from .rng import RngStream, derive_rng
from .scenario import (
    FailureEvent,
    FailureKind,
    LinkModel,
    LoadClass,
    NodeId,
    NodeSpec,
    Role,
    ScenarioSpec,
    TimingParams,
    dump_scenario,
    load_scenario,
    scenario_hash,
)
from .strategy import StrategyConfig, StrategyKind, format_strategy, parse_strategy

__all__ = [
    "Assignment",
    "FailureEvent",
    "FailureKind",
    "LatencySample",
    "LinkModel",
    "LoadClass",
    "McastConfig",
    "MeasurementReport",
    "NodeId",
    "NodeSpec",
    "RngStream",
    "Role",
    "SampleStatus",
    "ScenarioSpec",
    "StrategyConfig",
    "StrategyKind",
    "TimingParams",
    "derive_rng",
    "dump_scenario",
    "format_strategy",
    "load_scenario",
    "parse_strategy",
    "scenario_hash",
]
