"""Monte-Carlo experiment driver with CSV emission.

Four experiment protocols, each sweeping one variable over seeded random
deployments and comparing power-allocation schemes:

  - ``fig3-anchors-sweep``: single agent at the region center, anchors
    uniform in the square, perfect parameter knowledge, sweep anchor count.
  - ``fig5-agents-sweep``: ten anchors fixed evenly on a centered circle,
    agents uniform, sweep agent count; also exercises the two-stage schemes.
  - ``fig6-robust-anchors``: single agent with a position-disc uncertainty
    (normalized size ``eps``), anchors uniform, sweep anchor count; the
    reported objective is the actual SPEB at a true position drawn from the
    disc.
  - ``fig7-robust-epsilon``: ten anchors at random angles on the centered
    circle, agent at the center, sweep the normalized uncertainty size.

Per-trial objectives are the per-agent mean SPEB in m^2.  Rows are emitted
sorted by (sweep, scheme, trial) followed by aggregate rows, so the CSV is
byte-stable for a fixed config and seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import fim, solver, twostage
from .netmodel import NetworkScenario, generate_scenario, substream

EXPERIMENTS = (
    "fig3-anchors-sweep",
    "fig5-agents-sweep",
    "fig6-robust-anchors",
    "fig7-robust-epsilon",
)

SCHEMES = (
    "speb",
    "mdpeb",
    "robust-speb",
    "robust-mdpeb",
    "uniform",
    "two-stage-speb",
    "two-stage-mdpeb",
)

CSV_COLUMNS = ("experiment", "sweep", "scheme", "trial", "objective", "status")

_DEFAULT_SCHEMES = {
    "fig3-anchors-sweep": ("speb", "mdpeb", "uniform"),
    "fig5-agents-sweep": ("speb", "mdpeb", "uniform", "two-stage-speb", "two-stage-mdpeb"),
    "fig6-robust-anchors": ("robust-speb", "robust-mdpeb", "speb", "mdpeb", "uniform"),
    "fig7-robust-epsilon": ("robust-speb", "robust-mdpeb", "speb", "mdpeb", "uniform"),
}

_DEFAULT_SWEEPS = {
    "fig3-anchors-sweep": tuple(range(4, 13)),
    "fig5-agents-sweep": tuple(range(1, 11)),
    "fig6-robust-anchors": (4, 6, 8, 10, 12),
    "fig7-robust-epsilon": (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration of one Monte-Carlo experiment."""

    experiment: str
    trials: int = 1000
    schemes: tuple = ()
    sweep: tuple = ()
    eps: float = 0.2
    seed: int = 0
    n_anchors: int = 10
    n_agents: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        schemes = tuple(self.schemes) or _DEFAULT_SCHEMES[self.experiment]
        for s in schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        robust_ok = self.experiment in ("fig6-robust-anchors", "fig7-robust-epsilon")
        if not robust_ok and any(s.startswith("robust") for s in schemes):
            raise ValueError("robust schemes require a robust experiment")
        sweep = tuple(self.sweep) or _DEFAULT_SWEEPS[self.experiment]
        if self.experiment == "fig7-robust-epsilon":
            if any(not (0.0 < e <= 1.0) for e in sweep):
                raise ValueError("epsilon sweep values must lie in (0, 1]")
        else:
            if any(int(v) < 1 for v in sweep):
                raise ValueError("sweep values must be positive integers")
            sweep = tuple(int(v) for v in sweep)
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        object.__setattr__(self, "schemes", schemes)
        object.__setattr__(self, "sweep", sweep)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    sweep: float
    scheme: str
    trial: int
    objective: float
    status: str


def _solve_scheme(scenario: NetworkScenario, scheme: str, tol=1e-8):
    """Allocation of one scheme; returns (allocation, status)."""
    if scheme == "uniform":
        return fim.uniform_allocation(scenario), "optimal"
    if scheme in ("speb", "mdpeb"):
        # Non-robust schemes ignore the uncertainty model by construction.
        plain = scenario
        if scenario.uncertainty is not None:
            plain = NetworkScenario(
                agents=scenario.agents,
                anchors=scenario.anchors,
                xi=scenario.xi,
                p_total=scenario.p_total,
                region_side=scenario.region_side,
            )
        solve = solver.solve_speb if scheme == "speb" else solver.solve_mdpeb
        report = solve(plain, tol=tol)
    elif scheme == "robust-speb":
        report = solver.solve_robust_speb(scenario, tol=tol)
    elif scheme == "robust-mdpeb":
        report = solver.solve_robust_mdpeb(scenario, tol=tol)
    elif scheme in ("two-stage-speb", "two-stage-mdpeb"):
        metric = scheme.rsplit("-", 1)[1]
        try:
            report = twostage.algorithm1(scenario, metric=metric, tol=tol)
        except ValueError:
            return None, "infeasible"
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if report.status not in ("optimal", "max-iter") or report.allocation is None:
        return None, report.status
    return report.allocation, report.status


def _mean_speb(scenario: NetworkScenario, alloc: fim.PowerAllocation) -> float:
    vals = [fim.speb(fim.build_efim(scenario, alloc, k)) for k in range(scenario.n_agents)]
    return float(np.mean(vals))


def _true_position_scenario(scenario, eps_d, rng):
    """Scenario at the realized agent positions, drawn uniformly in the
    eps_d-disc around each nominal position; channel follows the distance."""
    offsets = np.empty((scenario.n_agents, 2))
    for k in range(scenario.n_agents):
        while True:
            cand = rng.uniform(-eps_d, eps_d, size=2)
            if cand[0] ** 2 + cand[1] ** 2 <= eps_d**2:
                offsets[k] = cand
                break
    true_agents = scenario.agents + offsets
    diff = true_agents[:, None, :] - scenario.anchors[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    xi = 1e3 / dist**2
    return NetworkScenario(
        agents=true_agents,
        anchors=scenario.anchors,
        xi=xi,
        p_total=scenario.p_total,
        region_side=scenario.region_side,
    )


def _trial_rows(config: ExperimentConfig, sweep_value, sweep_idx, trial) -> list:
    """All scheme rows of one Monte-Carlo trial."""
    exp = config.experiment
    seed_path = (config.seed, sweep_idx, trial)
    if exp == "fig3-anchors-sweep":
        scenario = generate_scenario(
            n_agents=1,
            n_anchors=int(sweep_value),
            placement="center-agent",
            seed=_trial_seed(seed_path),
        )
        evaluate = None
    elif exp == "fig5-agents-sweep":
        scenario = generate_scenario(
            n_agents=int(sweep_value),
            n_anchors=config.n_anchors,
            placement="fixed-circle",
            seed=_trial_seed(seed_path),
        )
        evaluate = None
    elif exp == "fig6-robust-anchors":
        eps_d = config.eps * 10.0  # region side 20, eps = 2*eps_d/side
        scenario = generate_scenario(
            n_agents=1,
            n_anchors=int(sweep_value),
            placement="center-agent",
            seed=_trial_seed(seed_path),
            eps_d=eps_d,
        )
        evaluate = eps_d
    else:  # fig7-robust-epsilon
        eps_d = float(sweep_value) * 10.0
        scenario = generate_scenario(
            n_agents=1,
            n_anchors=config.n_anchors,
            placement="random-circle",
            seed=_trial_seed(seed_path),
            eps_d=eps_d,
        )
        evaluate = eps_d

    if evaluate is not None:
        rng = substream(config.seed, sweep_idx, trial, 1)
        truth = _true_position_scenario(scenario, evaluate, rng)
    else:
        truth = scenario

    rows = []
    for scheme in config.schemes:
        alloc, status = _solve_scheme(scenario, scheme)
        if alloc is None:
            objective = math.inf
        else:
            objective = _mean_speb(truth, alloc)
        rows.append(
            ResultRow(
                experiment=exp,
                sweep=float(sweep_value),
                scheme=scheme,
                trial=trial,
                objective=objective,
                status=status,
            )
        )
    return rows


def _trial_seed(path):
    # Stable 63-bit scalar from the (seed, sweep, trial) path for generators
    # that take a single seed.
    h = np.random.SeedSequence(tuple(int(p) for p in path)).generate_state(1)[0]
    return int(h) & 0x7FFFFFFFFFFFFFFF


def run_experiment(config: ExperimentConfig) -> list:
    """All per-trial rows of the experiment, deterministic for a fixed config.

    Rows are sorted by (sweep, scheme, trial), so any parallel execution of
    trials would produce identical output.
    """
    rows = []
    for sweep_idx, sweep_value in enumerate(config.sweep):
        for trial in range(config.trials):
            rows.extend(_trial_rows(config, sweep_value, sweep_idx, trial))
    rows.sort(key=lambda r: (r.sweep, r.scheme, r.trial))
    return rows


def aggregate(rows) -> dict:
    """Mean objective per (sweep, scheme) over rows with a usable status.

    Returns {(sweep, scheme): (mean, n_used, n_excluded)}.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.sweep, r.scheme), []).append(r)
    out = {}
    for key, members in groups.items():
        good = [m.objective for m in members if m.status in ("optimal", "max-iter")
                and math.isfinite(m.objective)]
        excluded = len(members) - len(good)
        mean = float(np.mean(good)) if good else math.inf
        out[key] = (mean, len(good), excluded)
    return out


def rows_to_csv(rows) -> str:
    """Serialize rows plus aggregate lines; byte-stable for fixed input."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [r.experiment, repr(r.sweep), r.scheme, r.trial, repr(r.objective), r.status]
        )
    stats = aggregate(rows)
    for (sweep, scheme) in sorted(stats):
        mean, used, excluded = stats[(sweep, scheme)]
        writer.writerow(
            [
                rows[0].experiment if rows else "",
                repr(sweep),
                scheme,
                "mean",
                repr(mean),
                f"n={used};excluded={excluded}",
            ]
        )
    return buf.getvalue()
