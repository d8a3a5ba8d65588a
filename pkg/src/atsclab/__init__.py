"""Multi-agent reinforcement-learning traffic signal control laboratory."""

from .agent_graph import AgentNetwork, build_agent_graph
from .harness.config import RunConfig, load_config, validate_config
from .rl.agents import AgentKind
from .rl.training import LayerSizes, Trainer
from .traffic.scenario import GridParams, Scenario, build_grid_scenario, load_scenario
from .traffic.simulator import SimParams, TrafficSim

__all__ = [
    "AgentKind",
    "AgentNetwork",
    "GridParams",
    "LayerSizes",
    "RunConfig",
    "Scenario",
    "SimParams",
    "Trainer",
    "TrafficSim",
    "build_agent_graph",
    "build_grid_scenario",
    "load_config",
    "load_scenario",
    "validate_config",
]
