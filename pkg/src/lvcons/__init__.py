"""Local voting consensus over random networks, its averaged models, and load balancing."""

from .averaged import (
    AveragedDiscreteModel,
    AveragedOdeModel,
    BoundConstants,
    deviation_estimate,
    integrate_ode,
    deviation_bound_constants,
    consensus_bound_constants,
    time_to_eps_consensus,
)
from .core import (
    AgentDynamics,
    ConsensusScenario,
    ExtendedState,
    SimulationError,
    StepSizeSchedule,
    dynamics_family,
    run,
)
from .graph import WeightedDigraph, fiedler_bounds, has_spanning_tree, spectral_report
from .loadbalance import LbScenario, optimal_redistribution, run_comparison, run_lb
from .scenario import ScenarioConfig, ScenarioError, load_scenario, parse_scenario
from .topology import EdgeSpec, ExclusiveGroup, StochasticTopologySpec, build_a_max, sample

__version__ = "0.1.0"

__all__ = [
    "AgentDynamics",
    "AveragedDiscreteModel",
    "AveragedOdeModel",
    "ConsensusScenario",
    "EdgeSpec",
    "ExclusiveGroup",
    "ExtendedState",
    "LbScenario",
    "ScenarioConfig",
    "ScenarioError",
    "SimulationError",
    "StepSizeSchedule",
    "StochasticTopologySpec",
    "BoundConstants",
    "WeightedDigraph",
    "build_a_max",
    "deviation_estimate",
    "dynamics_family",
    "fiedler_bounds",
    "has_spanning_tree",
    "integrate_ode",
    "load_scenario",
    "optimal_redistribution",
    "parse_scenario",
    "run",
    "run_comparison",
    "run_lb",
    "sample",
    "spectral_report",
    "deviation_bound_constants",
    "consensus_bound_constants",
    "time_to_eps_consensus",
]
