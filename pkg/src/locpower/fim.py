"""Fisher-information metrics for agent positions.

Each anchor link contributes a rank-one term xi * x * u(phi) u(phi)^T to the
agent's 2x2 information matrix.  Position-error metrics (trace of the inverse,
directional bounds, the worst direction) all have closed 2x2 forms, which are
used throughout instead of generic linear algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netmodel import NetworkScenario

# Scale-aware singularity cutoff: det(J) <= DET_TOL * max(1, tr(J)^2) means
# the agent is not localizable from J and its error bounds are infinite.
DET_TOL = 1e-14


def unit_vector(phi):
    """Unit vector [cos(phi), sin(phi)]; vectorized over phi."""
    phi = np.asarray(phi, dtype=float)
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


@dataclass(frozen=True)
class PowerAllocation:
    """Nonnegative (n_agents, n_anchors) matrix of link transmit powers."""

    x: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def total(self):
        return float(np.sum(self.x))

    def validate(self, scenario: NetworkScenario, tol=1e-10):
        """Raise if the allocation violates the scenario's feasible set."""
        x = self.x
        if x.shape != scenario.xi.shape:
            raise ValueError("allocation shape does not match scenario")
        scale = max(1.0, scenario.p_total)
        if np.any(x < -tol * scale):
            raise ValueError("allocation has negative entries")
        if np.sum(x) > scenario.p_total + tol * scale:
            raise ValueError("allocation exceeds total power budget")
        if scenario.anchor_caps is not None:
            if np.any(np.sum(x, axis=0) > scenario.anchor_caps + tol * scale):
                raise ValueError("allocation exceeds a per-anchor cap")
        if scenario.link_lower is not None and np.any(x < scenario.link_lower - tol * scale):
            raise ValueError("allocation violates per-link lower bounds")
        if scenario.link_upper is not None and np.any(x > scenario.link_upper + tol * scale):
            raise ValueError("allocation violates per-link upper bounds")


@dataclass(frozen=True)
class Efim:
    """Symmetric 2x2 information matrix for one agent's position."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (2, 2):
            raise ValueError("information matrix must be 2x2")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def trace(self):
        return self.m[0, 0] + self.m[1, 1]

    @property
    def det(self):
        return self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0]

    def is_singular(self):
        return self.det <= DET_TOL * max(1.0, self.trace**2)


@dataclass(frozen=True)
class EigenDecomposition:
    """Ordered eigenvalues and principal-axis angle of a 2x2 information matrix.

    ``theta`` is the direction of the mu1 eigenvector, canonical in [0, pi);
    for repeated eigenvalues the convention is theta = 0.
    """

    mu1: float
    mu2: float
    theta: float

    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def reconstruct(self):
        u = self.rotation()
        return u @ np.diag([self.mu1, self.mu2]) @ u.T


def eigen(efim: Efim) -> EigenDecomposition:
    """Closed-form eigen decomposition of a symmetric 2x2 matrix.

    mu1, mu2 = (trace +- sqrt((a-d)^2 + 4 b^2)) / 2, which for an information
    matrix built from unit baselines equals half the total weight plus/minus
    the norm of the doubled-angle weight sum.
    """
    a, b = efim.m[0, 0], efim.m[0, 1]
    d = efim.m[1, 1]
    half_tr = 0.5 * (a + d)
    w = math.hypot(a - d, 2.0 * b)
    mu1 = half_tr + 0.5 * w
    mu2 = half_tr - 0.5 * w
    if w == 0.0:
        theta = 0.0
    else:
        theta = 0.5 * math.atan2(2.0 * b, a - d) % math.pi
    return EigenDecomposition(mu1=mu1, mu2=mu2, theta=theta)


def build_efim(scenario: NetworkScenario, alloc: PowerAllocation, agent: int) -> Efim:
    """Information matrix sum_j xi_kj x_kj u(phi_kj) u(phi_kj)^T for one agent."""
    x = alloc.x[agent]
    w = scenario.xi[agent] * x
    phi = scenario.link_angles[agent]
    c, s = np.cos(phi), np.sin(phi)
    a = float(np.dot(w, c * c))
    b = float(np.dot(w, c * s))
    d = float(np.dot(w, s * s))
    return Efim(np.array([[a, b], [b, d]]))


def speb(efim: Efim) -> float:
    """Squared position error bound tr(J^-1) = tr(J)/det(J); +inf if singular."""
    if efim.is_singular():
        return math.inf
    return efim.trace / efim.det


def dpeb(efim: Efim, phi) -> float:
    """Directional position error bound u(phi)^T J^-1 u(phi).

    For a singular J the bound is +inf whenever the direction has a component
    in the null space, and the pseudo-inverse quadratic form otherwise.
    """
    a, b = efim.m[0, 0], efim.m[0, 1]
    d = efim.m[1, 1]
    c, s = math.cos(phi), math.sin(phi)
    if not efim.is_singular():
        det = efim.det
        # J^-1 = [[d, -b], [-b, a]] / det
        return (d * c * c - 2.0 * b * c * s + a * s * s) / det
    eig = eigen(efim)
    scale = max(1.0, efim.trace)
    u1 = c * math.cos(eig.theta) + s * math.sin(eig.theta)
    u2 = -c * math.sin(eig.theta) + s * math.cos(eig.theta)
    out = 0.0
    for mu, comp in ((eig.mu1, u1), (eig.mu2, u2)):
        if mu <= DET_TOL * scale:
            if comp * comp > 1e-12:
                return math.inf
        else:
            out += comp * comp / mu
    return out


def mdpeb(efim: Efim) -> float:
    """Maximum DPEB over all directions, 1/mu2; +inf if singular."""
    if efim.is_singular():
        return math.inf
    return 1.0 / eigen(efim).mu2


def uniform_allocation(scenario: NetworkScenario) -> PowerAllocation:
    """Budget split equally over every agent-anchor link."""
    n = scenario.n_agents * scenario.n_anchors
    share = scenario.p_total / n
    return PowerAllocation(np.full((scenario.n_agents, scenario.n_anchors), share))


def equivalent_power(x, x_prime):
    """Round-trip ranging equivalent power g(x, x') = 4 / (1/x + 1/x')."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    out = np.zeros(np.broadcast_shapes(x.shape, x_prime.shape))
    pos = (x > 0.0) & (x_prime > 0.0)
    xb = np.broadcast_to(x, out.shape)
    xpb = np.broadcast_to(x_prime, out.shape)
    out[pos] = 4.0 / (1.0 / xb[pos] + 1.0 / xpb[pos])
    if out.ndim == 0 or (np.isscalar(x) and np.isscalar(x_prime)):
        return float(out)
    return out


def async_power_scale(p_total, agent_p_total):
    """Equivalent-power factor 4 P'_tot / (P'_tot + P_tot) for round-trip ranging.

    Achieved when agent-side powers are split proportionally to the anchor-side
    allocation, which maximizes the total equivalent power under both budgets.
    """
    if agent_p_total <= 0.0:
        raise ValueError("agent power budget must be positive")
    return 4.0 * agent_p_total / (agent_p_total + p_total)


def async_equivalent(scenario: NetworkScenario, alloc: PowerAllocation):
    """Per-agent EFIMs for an unsynchronized network under proportional split.

    Each synchronized-network term is scaled by 4 P'_tot / (P'_tot + P_tot);
    the implied agent-side powers are x'_kj = (P'_tot / P_tot) x_kj.
    """
    if scenario.agent_p_total is None:
        raise ValueError("scenario has no agent-side power budget")
    scale = async_power_scale(scenario.p_total, scenario.agent_p_total)
    return [
        Efim(scale * build_efim(scenario, alloc, k).m) for k in range(scenario.n_agents)
    ]
