"""
almcast - Application-layer multicast
Overlay hosts in a complete graph, end hosts distributed by a central monitor,
a deterministic network simulator and a loopback socket mode.
"""

__version__ = "0.1.0"

from .core.experiments import ExperimentResult, SimDeployment, run_failure_drill, run_figure
from .core.monitor import DistributionState, distribute
from .models.config import McastConfig
from .models.scenario import ScenarioSpec, load_scenario
from .utils.logger import setup_logger

__all__ = [
    "DistributionState",
    "ExperimentResult",
    "McastConfig",
    "ScenarioSpec",
    "SimDeployment",
    "distribute",
    "load_scenario",
    "run_failure_drill",
    "run_figure",
    "setup_logger",
]
