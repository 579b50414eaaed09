"""Optimal and robust transmit-power allocation for anchor-based localization.

Minimizes Fisher-information position-error bounds (SPEB and the worst
directional bound) over transmit-power polytopes, with worst-case robust
counterparts under channel/angle uncertainty, a distributed two-stage
decomposition, and a Monte-Carlo experiment harness.
"""

from .fim import (
    Efim,
    EigenDecomposition,
    PowerAllocation,
    build_efim,
    dpeb,
    eigen,
    mdpeb,
    speb,
    uniform_allocation,
    unit_vector,
)
from .netmodel import (
    LinkGeometry,
    NetworkScenario,
    PathLossModel,
    Position,
    UncertaintyModel,
    generate_scenario,
    link_geometry,
    scenario_from_json,
    scenario_to_json,
    worst_case_xi,
)
from .robust import (
    QMatrix,
    RobustEfim,
    delta_max,
    psd_condition,
    psd_frequency,
    q_matrix,
    robust_bound_dominates,
    robust_efim,
)
from .solver import (
    FeasibleSet,
    Objective,
    OracleResult,
    SolveReport,
    allocation_objective,
    oracle_grid,
    solve_energy_min,
    solve_mdpeb,
    solve_minmax,
    solve_robust_mdpeb,
    solve_robust_speb,
    solve_speb,
)
from .twostage import (
    StageOneSolution,
    StageTwoSolution,
    algorithm1,
    stage1,
    stage2_closed_form,
    stage2_with_anchor_caps,
)

__version__ = "0.1.0"
