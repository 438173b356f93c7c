"""Mobility-aware coordination of EV charging on capacity-limited feeders."""

from .model import (AWAY, CumulativeBounds, EvProfile, FeederSeries, LocationMap,
                    Scenario, ScenarioError, aggregate_load, derive_bounds,
                    check_necessary, is_feasible, project_feasible, grid_cost)
from .ev_solver import EvInstance, SolverOptions, solve_batch
from .feeder_solver import UNBOUNDED, solve_s2, solve_d2

__version__ = "0.1.0"
