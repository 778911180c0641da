"""Solvers for time-varying Markov decision processes.

The package models planning under time-varying stochastic disturbances
(for example a vehicle in rotating ocean currents) as an MDP whose
transition law depends on time. Besides exhaustive value iteration over
the full (state, slot) space, it provides approximate solvers that
confine the search to the state-time pairs actually likely to be
visited, predicted from the first two moments of per-state passage
times.
"""

from .core import (
    ContractViolation,
    GridMap,
    Policy,
    TableLaw,
    TimeGrid,
    TvmdpModel,
    ValueTable,
    step_cost_reward,
)
from .disturbance import GriddedField, SelfSpinningField, VortexField, load_gridded_field, write_gridded_field
from .moments import (
    PptMoments,
    ReachableSpace,
    build_reachable_space,
    compute_ppt_moments,
    expected_ppt,
    ppt_variance,
)
from .scenario import Scenario, ScenarioConfig, build_scenario, load_config
from .simulate import Rollout, benchmark, evaluate_policy_return, first_visit_oracle, rollout
from .solvers import (
    SolveResult,
    SolverConfig,
    map_action,
    reconstruct,
    solve_expected_ppt_vi,
    solve_full_st_vi,
    solve_non_iterative,
    solve_reachable_vi,
)
from .transitions import (
    GaussianHeadingModel,
    GridLaw,
    LocalTimeTable,
    VehicleModel,
    estimate_local_times_mc,
    heading_distribution,
    unit_local_times,
)

__version__ = "0.1.0"
