"""Two-stage decomposition of multi-agent power allocation.

Link powers factor as x_kj = rho_kj * P_k: stage one solves each agent's
anchor-fraction problem at unit budget (independent across agents, so the
stage parallelizes), stage two splits the total budget across agents.  With
only the total-budget constraint the split has the closed form
P_k = P_total * sqrt(T_k) / sum(sqrt(T)), where T_k is agent k's unit-budget
objective; with per-anchor caps the split is a small convex solve instead.
The recombined allocation matches the one-stage optimum.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import fim, solver
from .netmodel import NetworkScenario, UncertaintyModel


@dataclass(frozen=True)
class StageOneSolution:
    """Anchor fractions for one agent and its unit-budget objective T."""

    agent: int
    rho: np.ndarray
    t_value: float
    metric: str
    status: str

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)


@dataclass(frozen=True)
class StageTwoSolution:
    """Per-agent budget split with sum(p) <= p_total."""

    p: np.ndarray
    objective: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)


def _single_agent_scenario(scenario: NetworkScenario, agent: int) -> NetworkScenario:
    """Agent k's unit-budget subproblem over the fraction simplex."""
    unc = scenario.uncertainty
    if unc is not None:
        unc = UncertaintyModel(
            eps_xi=unc.eps_xi[agent : agent + 1].copy(),
            eps_phi=unc.eps_phi[agent : agent + 1].copy(),
            eps_d=unc.eps_d,
            normalized_size=unc.normalized_size,
        )
    return NetworkScenario(
        agents=scenario.agents[agent : agent + 1],
        anchors=scenario.anchors,
        xi=scenario.xi[agent : agent + 1],
        p_total=1.0,
        uncertainty=unc,
        region_side=scenario.region_side,
    )


def _stage1_kind(scenario: NetworkScenario, metric: str) -> str:
    if metric not in ("speb", "mdpeb"):
        raise ValueError(f"unknown objective mode {metric!r}")
    if scenario.uncertainty is not None:
        return f"robust-{metric}"
    return metric


def stage1(scenario: NetworkScenario, agent: int, metric="speb", tol=solver.DEFAULT_TOL):
    """Solve agent ``agent``'s unit-budget fraction problem.

    T is the agent's objective per unit power: the worst-case SPEB surrogate
    in SPEB mode, the reciprocal of the surrogate's smaller eigenvalue in
    mDPEB mode.  Either way the fractions are independent of the budget the
    agent eventually receives.
    """
    kind = _stage1_kind(scenario, metric)
    sub = _single_agent_scenario(scenario, agent)
    solve = {
        "speb": solver.solve_speb,
        "mdpeb": solver.solve_mdpeb,
        "robust-speb": solver.solve_robust_speb,
        "robust-mdpeb": solver.solve_robust_mdpeb,
    }[kind]
    report = solve(sub, tol=tol)
    if report.status not in ("optimal", "max-iter"):
        raise ValueError(f"agent {agent} is not localizable ({report.status})")
    return StageOneSolution(
        agent=agent,
        rho=report.allocation.x[0],
        t_value=report.objective,
        metric=kind,
        status=report.status,
    )


def stage2_closed_form(t_values, p_total) -> StageTwoSolution:
    """Budget split proportional to sqrt(T_k); exact optimum of stage two."""
    t_values = np.asarray(t_values, dtype=float)
    if np.any(t_values <= 0.0):
        raise ValueError("stage-one objectives must be positive")
    if p_total <= 0.0:
        raise ValueError("power budget must be positive")
    roots = np.sqrt(t_values)
    p = p_total * roots / np.sum(roots)
    return StageTwoSolution(p=p, objective=float(np.sum(t_values / p)))


def stage2_kkt_residual(split: StageTwoSolution, t_values, p_total) -> float:
    """Relative stationarity/feasibility residual of the budget-split program.

    At the optimum T_k / P_k^2 is one shared multiplier and the budget binds.
    """
    t_values = np.asarray(t_values, dtype=float)
    ratios = t_values / split.p**2
    nu = float(np.mean(ratios))
    stat = float(np.max(np.abs(ratios - nu))) / max(nu, 1e-300)
    feas = abs(float(np.sum(split.p)) - p_total) / p_total
    return max(stat, feas)


def stage2_with_anchor_caps(
    scenario: NetworkScenario, rho, t_values, caps=None, tol=solver.DEFAULT_TOL
) -> StageTwoSolution:
    """Budget split under per-anchor caps sum_k rho_kj P_k <= cap_j.

    The closed form no longer applies; the split is still convex so a barrier
    solve recovers it for the fixed fractions.
    """
    rho = np.asarray(rho, dtype=float)
    t_values = np.asarray(t_values, dtype=float)
    if np.any(t_values <= 0.0):
        raise ValueError("stage-one objectives must be positive")
    caps = scenario.anchor_caps if caps is None else np.asarray(caps, dtype=float)
    if caps is None:
        closed = stage2_closed_form(t_values, scenario.p_total)
        return closed
    if np.any(caps <= 0.0):
        raise ValueError("infeasible: nonpositive anchor cap")

    na = t_values.size
    obj = [solver._RecipTerm(np.ones((na, 1)), na, r_offset=None, nu=t_values)]
    bars = [
        solver._BoxBarrier(np.arange(na), np.zeros(na)),
        solver._AffineBarrier(np.arange(na), np.ones(na), scenario.p_total),
    ]
    for j in range(rho.shape[1]):
        if np.any(rho[:, j] > 0.0):
            bars.append(solver._AffineBarrier(np.arange(na), rho[:, j], caps[j]))

    p0 = np.full(na, 0.99 * scenario.p_total / na)
    for _ in range(80):
        if np.all(rho.T @ p0 < caps):
            break
        p0 *= 0.5
    result = solver._solve_barrier(obj, bars, p0, tol)
    p = result.v.copy()
    # Scale up to the tightest binding constraint; the objective improves.
    scale = scenario.p_total / float(np.sum(p))
    col = rho.T @ p
    pos = col > 0.0
    if np.any(pos):
        scale = min(scale, float(np.min(caps[pos] / col[pos])))
    if scale > 1.0:
        p = p * scale
    return StageTwoSolution(p=p, objective=float(np.sum(t_values / p)))


def algorithm1(scenario: NetworkScenario, metric="speb", tol=solver.DEFAULT_TOL):
    """Full two-stage solve: per-agent fractions, budget split, recombination.

    Returns a report whose allocation is x_kj = rho_kj * P_k and whose
    objective is evaluated with the same closed forms as the one-stage solver,
    so the two paths are directly comparable.
    """
    start = time.perf_counter()
    kind = _stage1_kind(scenario, metric)
    stages = [stage1(scenario, k, metric=metric, tol=tol) for k in range(scenario.n_agents)]
    t_values = np.array([s.t_value for s in stages])
    rho = np.vstack([s.rho for s in stages])
    if scenario.anchor_caps is not None:
        split = stage2_with_anchor_caps(scenario, rho, t_values, tol=tol)
    else:
        split = stage2_closed_form(t_values, scenario.p_total)
    x = rho * split.p[:, None]
    alloc = fim.PowerAllocation(x)
    objective = solver.allocation_objective(scenario, alloc, kind)
    status = "optimal" if all(s.status == "optimal" for s in stages) else "max-iter"
    return solver.SolveReport(
        status=status,
        objective=objective,
        allocation=alloc,
        kkt_residual=math.nan,
        iterations=0,
        wall_time=time.perf_counter() - start,
        kind=f"two-stage-{kind}",
    )
