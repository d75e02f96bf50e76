"""Integer barter economies: elementary reallocations, local search,
Pareto enumeration, an interior-point relaxation and exact oracles."""

from .economy import (EconomyInstance, UtilitySpec, is_feasible, load_instance, save_instance,
                      utility_vector, validate_instance)
from .errors import InvalidInstanceError, NotConvergedError, ResourceLimitError
from .erp import direction, pareto_frontier, step_interval
from .ipm import relaxation, run_ipm, solve_relaxation
from .network import TradeNetwork, run_network_ser
from .oracle import branch_and_bound_linear, enumerate_allocations, prop1_bound
from .pareto import enumerate_paths, pareto_filter
from .ser import SearchConfig, run_ser

__all__ = [
    "EconomyInstance", "UtilitySpec", "is_feasible", "load_instance", "save_instance", "utility_vector",
    "validate_instance", "InvalidInstanceError", "NotConvergedError", "ResourceLimitError", "direction",
    "pareto_frontier", "step_interval", "relaxation", "run_ipm", "solve_relaxation", "TradeNetwork",
    "run_network_ser", "branch_and_bound_linear", "enumerate_allocations", "prop1_bound", "enumerate_paths",
    "pareto_filter", "SearchConfig", "run_ser",
]
