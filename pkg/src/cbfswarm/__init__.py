"""Distributed safe navigation for unicycle teams.

Barrier-based safety constraints are split across agents with mismatch
variables, each agent solves a small input-selection QP, and a projected
saddle-point flow drives the mismatch variables while the plants run.
"""

__version__ = "0.1.0"

from .barriers import (
    ConstraintRow,
    ObstacleSpec,
    PairSafetyParams,
    barrier_eval,
    eta_margin,
    interagent_constraint_rows,
    obstacle_constraint_row,
)
from .dynamics import (
    AgentState,
    ControlInput,
    OffAxisParams,
    off_axis_transform,
    unicycle_step,
)
from .formation import (
    FormationSpec,
    NominalGains,
    WaypointPlan,
    advance_waypoint,
    formation_goal,
    k_neighborhoods,
    nominal_control,
)
from .netgraph import (
    CommGraph,
    ConstraintSubgraph,
    MismatchIndex,
    build_subgraphs,
    mismatch_index,
)
from .qpsolve import (
    CentralizedSolution,
    LocalQP,
    QPSolution,
    assemble_local_qp,
    kkt_residuals,
    solve_centralized_regularized,
    solve_centralized_unregularized,
    solve_qp,
)
from .scenario import (
    FlowParams,
    ScenarioConfig,
    ScenarioError,
    TrajectoryLog,
    parse_scenario,
    save_scenario,
)
from .saddleflow import (
    FlowState,
    WorldState,
    fast_flow_rhs,
    flow_step,
    simulate,
    warm_start,
)
from .team import TeamContext, build_context
from .metrics import MetricsReport, compute_metrics

__all__ = [
    "AgentState", "ControlInput", "OffAxisParams", "off_axis_transform", "unicycle_step",
    "ObstacleSpec", "PairSafetyParams", "ConstraintRow", "barrier_eval", "eta_margin",
    "obstacle_constraint_row", "interagent_constraint_rows",
    "NominalGains", "WaypointPlan", "FormationSpec", "nominal_control", "advance_waypoint",
    "k_neighborhoods", "formation_goal",
    "CommGraph", "ConstraintSubgraph", "MismatchIndex", "build_subgraphs", "mismatch_index",
    "LocalQP", "QPSolution", "CentralizedSolution", "solve_qp", "assemble_local_qp",
    "kkt_residuals", "solve_centralized_regularized", "solve_centralized_unregularized",
    "FlowParams", "ScenarioConfig", "ScenarioError", "TrajectoryLog", "parse_scenario",
    "save_scenario",
    "FlowState", "WorldState", "fast_flow_rhs", "flow_step", "warm_start", "simulate",
    "TeamContext", "build_context", "MetricsReport", "compute_metrics",
]
