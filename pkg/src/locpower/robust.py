"""Worst-case surrogates for power allocation under parameter uncertainty.

The adversarial channel coefficient is the lower interval endpoint.  Angle
uncertainty is absorbed by replacing each rank-one direction matrix with
Q(phi_hat) = u(phi_hat) u(phi_hat)^T - sin(eps_phi) * I, which upper-bounds
the worst-case error bound whenever the resulting information matrix stays
positive semidefinite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fim
from .netmodel import NetworkScenario

# mu2 >= -PSD_TOL counts as positive semidefinite (closure convention).
PSD_TOL = 1e-12


@dataclass(frozen=True)
class QMatrix:
    """Direction matrix shrunk by the angle-uncertainty margin delta."""

    q: np.ndarray
    delta: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


def q_matrix(phi_hat, eps_phi) -> QMatrix:
    """Q(phi_hat) = u(phi_hat) u(phi_hat)^T - sin(eps_phi) * I.

    Its eigenvalues are 1 - delta and -delta with delta = sin(eps_phi), so the
    matrix is indefinite for any positive uncertainty.
    """
    if not 0.0 <= eps_phi < math.pi / 2.0:
        raise ValueError("eps_phi must lie in [0, pi/2)")
    delta = math.sin(eps_phi)
    c, s = math.cos(phi_hat), math.sin(phi_hat)
    q = np.array([[c * c - delta, c * s], [c * s, s * s - delta]])
    return QMatrix(q=q, delta=delta)


@dataclass(frozen=True)
class RobustEfim:
    """Worst-case surrogate information matrix and its eigenvalues.

    mu1/mu2 follow the closed form
    (sum xi x (1 - 2 delta) +- ||sum xi x u(2 phi_hat)||) / 2.
    """

    m: np.ndarray
    mu1: float
    mu2: float

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def surrogate_speb(self):
        """tr(m^-1) when positive definite, else +inf."""
        det = self.mu1 * self.mu2
        tr = self.mu1 + self.mu2
        if det <= fim.DET_TOL * max(1.0, tr**2) or self.mu2 <= 0.0:
            return math.inf
        return tr / det

    def surrogate_mdpeb(self):
        """1/mu2 when positive, else +inf."""
        if self.mu2 <= fim.DET_TOL * max(1.0, abs(self.mu1)):
            return math.inf
        return 1.0 / self.mu2


def _robust_efim_components(weights, phi_hat, delta):
    """(a, b, d) entries of sum_j w_j Q(phi_hat_j, delta_j) plus eigen terms."""
    c, s = np.cos(phi_hat), np.sin(phi_hat)
    shrink = np.dot(weights, delta)
    a = np.dot(weights, c * c) - shrink
    b = np.dot(weights, c * s)
    d = np.dot(weights, s * s) - shrink
    return a, b, d


def robust_efim_single(weights, phi_hat, delta) -> RobustEfim:
    """Surrogate matrix for one agent from per-link worst-case weights."""
    a, b, d = _robust_efim_components(weights, phi_hat, delta)
    half_tr = 0.5 * (a + d)
    half_w = 0.5 * math.hypot(a - d, 2.0 * b)
    return RobustEfim(
        m=np.array([[a, b], [b, d]]), mu1=half_tr + half_w, mu2=half_tr - half_w
    )


def robust_efim(scenario: NetworkScenario, alloc: fim.PowerAllocation):
    """Per-agent worst-case surrogate information matrices."""
    worst = scenario.worst_xi()
    delta = scenario.delta()
    return [
        robust_efim_single(
            worst[k] * alloc.x[k], scenario.link_angles[k], delta[k]
        )
        for k in range(scenario.n_agents)
    ]


def psd_condition(robust: RobustEfim) -> bool:
    """True iff the surrogate is positive semidefinite (mu2 >= -1e-12)."""
    return robust.mu2 >= -PSD_TOL


@dataclass(frozen=True)
class DominanceReport:
    """Outcome of sampling realized error bounds against the robust surrogate."""

    n_samples: int
    violations: int
    max_violation: float
    min_slack: float
    max_slack: float
    witness: tuple | None

    @property
    def ok(self):
        return self.violations == 0


def _sample_parameter_box(rng, phi_hat, eps_phi, xi_hat, eps_xi, n_samples):
    """Uniform box samples plus deterministic corner/extreme combinations."""
    n_links = phi_hat.size
    u = rng.uniform(-1.0, 1.0, size=(n_samples, n_links))
    v = rng.uniform(-1.0, 1.0, size=(n_samples, n_links))
    corners = []
    for sp in (-1.0, 1.0):
        corners.append((np.full(n_links, sp), np.full(n_links, -1.0)))
        corners.append((np.full(n_links, sp), np.full(n_links, 1.0)))
        corners.append((np.full(n_links, sp), np.zeros(n_links)))
    phi_dev = np.vstack([u] + [c[0][None, :] for c in corners])
    xi_dev = np.vstack([v] + [c[1][None, :] for c in corners])
    phis = phi_hat[None, :] + phi_dev * eps_phi[None, :]
    xis = xi_hat[None, :] + xi_dev * eps_xi[None, :]
    return phis, xis


def robust_bound_dominates(
    scenario: NetworkScenario,
    alloc: fim.PowerAllocation,
    n_samples=10_000,
    seed=0,
    delta=None,
) -> DominanceReport:
    """Check realized SPEB <= surrogate bound over the parameter box.

    Samples angle/coefficient realizations from the uncertainty intervals
    (uniformly, plus the box corners and angle extremes) and compares the
    realized SPEB of the fixed allocation against the surrogate value.
    ``delta`` overrides the per-link shrinkage, which deliberately breaks the
    guarantee when set below sin(eps_phi).
    """
    if scenario.uncertainty is None:
        raise ValueError("scenario has no uncertainty model")
    worst = scenario.worst_xi()
    delta_used = scenario.delta() if delta is None else np.broadcast_to(
        np.asarray(delta, dtype=float), scenario.xi.shape
    )
    surrogates = []
    for k in range(scenario.n_agents):
        rk = robust_efim_single(
            worst[k] * alloc.x[k], scenario.link_angles[k], delta_used[k]
        )
        if not psd_condition(rk):
            raise ValueError(f"surrogate for agent {k} is not positive semidefinite")
        surrogates.append(rk.surrogate_speb())

    unc = scenario.uncertainty
    violations = 0
    max_violation = 0.0
    min_slack = math.inf
    max_slack = -math.inf
    witness = None
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), 1))))
    for k in range(scenario.n_agents):
        phis, xis = _sample_parameter_box(
            rng,
            scenario.link_angles[k],
            unc.eps_phi[k],
            scenario.xi[k],
            unc.eps_xi[k],
            n_samples,
        )
        w = xis * alloc.x[k][None, :]
        c, s = np.cos(phis), np.sin(phis)
        a = np.sum(w * c * c, axis=1)
        b = np.sum(w * c * s, axis=1)
        d = np.sum(w * s * s, axis=1)
        tr = a + d
        det = a * d - b * b
        realized = np.where(
            det > fim.DET_TOL * np.maximum(1.0, tr**2), tr / np.maximum(det, 1e-300), np.inf
        )
        slack = surrogates[k] - realized
        bad = slack < 0.0
        violations += int(np.count_nonzero(bad))
        if np.any(bad):
            i = int(np.argmin(slack))
            if -slack[i] > max_violation:
                max_violation = float(-slack[i])
                witness = (k, phis[i].copy(), xis[i].copy(), float(realized[i]))
        min_slack = min(min_slack, float(np.min(slack)))
        max_slack = max(max_slack, float(np.max(slack)))
    return DominanceReport(
        n_samples=int(phis.shape[0]) * scenario.n_agents,
        violations=violations,
        max_violation=max_violation,
        min_slack=min_slack,
        max_slack=max_slack,
        witness=witness,
    )


def delta_max(zeta_ratio) -> float:
    """Largest admissible shrinkage for the dense-anchor semidefiniteness law.

    Smallest positive root of 4 d^4 - 4 d^2 - 2 R d + 1 = 0 for the fading
    spread R = zeta_max/zeta_min >= 1, found by bisection; the polynomial is
    strictly decreasing on (0, 0.7), so the bracketing root is the smallest.
    """
    ratio = float(zeta_ratio)
    if ratio < 1.0:
        raise ValueError("zeta_max/zeta_min must be at least 1")

    def poly(d):
        return 4.0 * d**4 - 4.0 * d**2 - 2.0 * ratio * d + 1.0

    lo, hi = 1e-9, 0.5
    if poly(lo) <= 0.0 or poly(hi) >= 0.0:
        raise ValueError("root bracketing failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if poly(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    root = 0.5 * (lo + hi)
    return root


def psd_frequency(
    n_anchors=30,
    eps_phi=0.1,
    zeta_min=1.0,
    zeta_max=1.0,
    beta=1.0,
    trials=100,
    seed=0,
    n_agents=1,
    region_side=20.0,
    tol=1e-8,
):
    """Fraction of random deployments whose robust optimum is semidefinite.

    Each trial draws all nodes uniformly in the square region, channel
    coefficients zeta/d^(2*beta) with zeta uniform on its support, attaches
    the constant angle half-width, and solves the robust SPEB program.  A
    trial counts when the solve succeeds and every agent's surrogate is
    positive semidefinite.
    """
    from . import solver  # local import; solver builds on this module
    from .netmodel import PathLossModel, generate_scenario

    if trials < 1:
        raise ValueError("trials must be at least 1")
    rule = PathLossModel(
        zeta_min=zeta_min, zeta_max=zeta_max, beta=beta, region_side=region_side
    )
    hits = 0
    for trial in range(trials):
        scenario = generate_scenario(
            n_agents=n_agents,
            n_anchors=n_anchors,
            region_side=region_side,
            placement="uniform",
            channel_rule=rule,
            seed=(int(seed) << 20) + trial,
        ).with_uncertainty(eps_phi=eps_phi)
        report = solver.solve_robust_speb(scenario, tol=tol)
        if report.status != "optimal":
            continue
        if all(psd_condition(r) for r in robust_efim(scenario, report.allocation)):
            hits += 1
    return hits / trials
