"""Problem instances for localization power allocation.

A scenario bundles node geometry (agents with unknown positions, anchors at
known positions), per-link channel coefficients, the transmit power budget and
an optional uncertainty model for the channel/angle estimates.  Scenarios are
immutable after construction and can be generated reproducibly from a seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi

# Minimum node separation enforced during random generation (meters).
DEFAULT_MIN_SEPARATION = 0.1
# Default square region is [-10, 10] x [-10, 10].
DEFAULT_REGION_SIDE = 20.0
# Margin multiplying eps_d when enforcing agent-anchor separation, so that
# arcsin(eps_d / d) stays strictly below pi/2.
_EPS_D_SEPARATION_MARGIN = 1.02


def substream(seed, *path):
    """Counter-based RNG substream, a pure function of (seed, *path).

    Uses Philox so parallel trials can draw from independent streams that do
    not depend on execution order.
    """
    entropy = (int(seed),) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class Position:
    """2-D node position in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("position coordinates must be finite")

    def as_array(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class LinkGeometry:
    """Polar decomposition of an agent-anchor baseline.

    ``angle`` is the direction from the agent towards the anchor, canonical in
    [0, 2*pi); ``distance`` is the Euclidean separation in meters.
    """

    angle: float
    distance: float


def link_geometry(p_agent: Position, p_anchor: Position) -> LinkGeometry:
    """Angle and distance of the baseline between an agent and an anchor."""
    dx = p_anchor.x - p_agent.x
    dy = p_anchor.y - p_agent.y
    d = math.hypot(dx, dy)
    if d == 0.0:
        raise ValueError("degenerate link: agent and anchor positions coincide")
    return LinkGeometry(angle=math.atan2(dy, dx) % TWO_PI, distance=d)


@dataclass(frozen=True)
class PathLossModel:
    """Channel coefficient model xi = zeta / d^(2*beta).

    ``zeta`` captures shadowing/fading and is drawn uniformly from
    [zeta_min, zeta_max]; ``beta`` is the amplitude loss exponent.
    """

    zeta_min: float = 1.0
    zeta_max: float = 1.0
    beta: float = 1.0
    r0: float = DEFAULT_MIN_SEPARATION
    region_side: float = DEFAULT_REGION_SIDE

    def __post_init__(self):
        if not (0.0 < self.zeta_min <= self.zeta_max):
            raise ValueError("require 0 < zeta_min <= zeta_max")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")

    @property
    def zeta_ratio(self):
        return self.zeta_max / self.zeta_min


@dataclass(frozen=True)
class UncertaintyModel:
    """Interval uncertainty for per-link channel coefficients and angles.

    ``eps_xi`` and ``eps_phi`` are (n_agents, n_anchors) arrays of half-widths.
    When built from a position-disc radius ``eps_d``, the angle half-width per
    link is arcsin(eps_d / distance) and ``normalized_size`` is
    2*eps_d / region_side.
    """

    eps_xi: np.ndarray
    eps_phi: np.ndarray
    eps_d: float | None = None
    normalized_size: float | None = None

    def __post_init__(self):
        eps_xi = np.asarray(self.eps_xi, dtype=float)
        eps_phi = np.asarray(self.eps_phi, dtype=float)
        if eps_xi.shape != eps_phi.shape:
            raise ValueError("eps_xi and eps_phi must have the same shape")
        if np.any(eps_xi < 0.0):
            raise ValueError("eps_xi must be nonnegative")
        if np.any(eps_phi < 0.0) or np.any(eps_phi >= math.pi / 2.0):
            raise ValueError("eps_phi must lie in [0, pi/2)")
        eps_xi.setflags(write=False)
        eps_phi.setflags(write=False)
        object.__setattr__(self, "eps_xi", eps_xi)
        object.__setattr__(self, "eps_phi", eps_phi)

    @property
    def delta(self):
        """sin(eps_phi) per link, the shrinkage used by the robust surrogate."""
        return np.sin(self.eps_phi)


def uncertainty_from_disc(eps_d, distances, region_side=DEFAULT_REGION_SIDE, eps_xi=0.0):
    """Uncertainty model induced by a position disc of radius ``eps_d``.

    Requires ``eps_d`` strictly below every link distance so the arcsin is
    defined and the per-link angle half-width stays below pi/2.
    """
    distances = np.asarray(distances, dtype=float)
    if eps_d < 0.0:
        raise ValueError("eps_d must be nonnegative")
    if np.any(distances <= eps_d):
        raise ValueError("eps_d must be smaller than every link distance")
    eps_phi = np.arcsin(eps_d / distances)
    eps_xi_arr = np.broadcast_to(np.asarray(eps_xi, dtype=float), distances.shape).copy()
    return UncertaintyModel(
        eps_xi=eps_xi_arr,
        eps_phi=eps_phi,
        eps_d=float(eps_d),
        normalized_size=2.0 * float(eps_d) / region_side,
    )


def worst_case_xi(xi_hat, eps_xi):
    """Worst-case channel coefficient xi_hat - eps_xi (elementwise).

    The position-error bound is non-increasing in the channel coefficient, so
    the lower interval endpoint is the adversarial value.
    """
    xi_hat = np.asarray(xi_hat, dtype=float)
    eps_xi = np.asarray(eps_xi, dtype=float)
    worst = xi_hat - eps_xi
    if np.any(worst <= 0.0):
        raise ValueError("uncertainty exceeds coefficient")
    if worst.ndim == 0:
        return float(worst)
    return worst


@dataclass(frozen=True)
class NetworkScenario:
    """Immutable problem instance for power allocation.

    ``agents`` and ``anchors`` are (n, 2) position arrays, ``xi`` the
    (n_agents, n_anchors) channel coefficient matrix and ``p_total`` the total
    anchor-side power budget.  Optional per-anchor caps, per-link bounds and an
    agent-side budget (for round-trip ranging) refine the feasible set.
    """

    agents: np.ndarray
    anchors: np.ndarray
    xi: np.ndarray
    p_total: float = 1.0
    uncertainty: UncertaintyModel | None = None
    anchor_caps: np.ndarray | None = None
    link_lower: np.ndarray | None = None
    link_upper: np.ndarray | None = None
    agent_p_total: float | None = None
    region_side: float = DEFAULT_REGION_SIDE
    seed: int | None = None
    # Derived link geometry, filled in __post_init__.
    link_angles: np.ndarray = field(init=False, repr=False)
    link_distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        agents = np.atleast_2d(np.asarray(self.agents, dtype=float))
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        xi = np.asarray(self.xi, dtype=float)
        if agents.shape[0] < 1 or anchors.shape[0] < 1:
            raise ValueError("scenario needs at least one agent and one anchor")
        if agents.shape[1] != 2 or anchors.shape[1] != 2:
            raise ValueError("positions must be (n, 2) arrays")
        if xi.shape != (agents.shape[0], anchors.shape[0]):
            raise ValueError("xi must have shape (n_agents, n_anchors)")
        if np.any(xi <= 0.0):
            raise ValueError("channel coefficients must be positive")
        if self.p_total <= 0.0:
            raise ValueError("power budget must be positive")
        if self.agent_p_total is not None and self.agent_p_total <= 0.0:
            raise ValueError("agent power budget must be positive")

        diff = agents[:, None, :] - anchors[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        if np.any(dist == 0.0):
            raise ValueError("degenerate link: agent and anchor positions coincide")
        ang = np.arctan2(-diff[..., 1], -diff[..., 0]) % TWO_PI

        caps = self.anchor_caps
        if caps is not None:
            caps = np.asarray(caps, dtype=float)
            if caps.shape != (anchors.shape[0],):
                raise ValueError("anchor_caps must have shape (n_anchors,)")
            caps.setflags(write=False)
        lower = self.link_lower
        if lower is not None:
            lower = np.asarray(lower, dtype=float)
            if lower.shape != xi.shape or np.any(lower < 0.0):
                raise ValueError("link_lower must be a nonnegative (n_agents, n_anchors) array")
            lower.setflags(write=False)
        upper = self.link_upper
        if upper is not None:
            upper = np.asarray(upper, dtype=float)
            if upper.shape != xi.shape:
                raise ValueError("link_upper must have shape (n_agents, n_anchors)")
            upper.setflags(write=False)

        for arr in (agents, anchors, xi, ang, dist):
            arr.setflags(write=False)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "anchor_caps", caps)
        object.__setattr__(self, "link_lower", lower)
        object.__setattr__(self, "link_upper", upper)
        object.__setattr__(self, "link_angles", ang)
        object.__setattr__(self, "link_distances", dist)

    @property
    def n_agents(self):
        return self.agents.shape[0]

    @property
    def n_anchors(self):
        return self.anchors.shape[0]

    def worst_xi(self):
        """Channel coefficients at the adversarial interval endpoint."""
        if self.uncertainty is None:
            return self.xi
        return worst_case_xi(self.xi, self.uncertainty.eps_xi)

    def delta(self):
        """Per-link sin(eps_phi); zeros without an uncertainty model."""
        if self.uncertainty is None:
            return np.zeros_like(self.xi)
        return self.uncertainty.delta

    def with_uncertainty(self, eps_d=None, eps_xi=0.0, eps_phi=None):
        """Return a copy with an attached uncertainty model.

        Either give a disc radius ``eps_d`` (angle half-widths derived per
        link) or explicit ``eps_phi`` half-widths.
        """
        if eps_d is not None:
            model = uncertainty_from_disc(
                eps_d, self.link_distances, region_side=self.region_side, eps_xi=eps_xi
            )
        else:
            eps_phi_arr = np.broadcast_to(
                np.asarray(eps_phi, dtype=float), self.xi.shape
            ).copy()
            eps_xi_arr = np.broadcast_to(np.asarray(eps_xi, dtype=float), self.xi.shape).copy()
            model = UncertaintyModel(eps_xi=eps_xi_arr, eps_phi=eps_phi_arr)
        worst_case_xi(self.xi, model.eps_xi)  # validates xi - eps_xi > 0
        return replace(self, uncertainty=model)


def _channel_from_rule(rule, distances, rng):
    """Evaluate a channel rule on a distance matrix."""
    if callable(rule):
        return np.asarray(rule(distances), dtype=float)
    if isinstance(rule, PathLossModel):
        zeta = rng.uniform(rule.zeta_min, rule.zeta_max, size=distances.shape)
        return zeta / distances ** (2.0 * rule.beta)
    if rule == "inverse-square":
        return 1e3 / distances**2
    raise ValueError(f"unknown channel rule: {rule!r}")


def _place_uniform(rng, count, half_side, taken, min_sep, max_tries=1000):
    """Draw ``count`` points uniformly, resampling any point closer than
    ``min_sep`` to a previously placed one."""
    placed = list(taken)
    out = np.empty((count, 2))
    for i in range(count):
        for _ in range(max_tries):
            p = rng.uniform(-half_side, half_side, size=2)
            if all(np.hypot(*(p - q)) >= min_sep for q in placed):
                break
        else:
            raise ValueError("could not place nodes with the requested separation")
        placed.append(p)
        out[i] = p
    return out


def generate_scenario(
    n_agents=1,
    n_anchors=10,
    region_side=DEFAULT_REGION_SIDE,
    placement="uniform",
    channel_rule="inverse-square",
    seed=0,
    p_total=1.0,
    eps_d=None,
    eps_xi=0.0,
    min_separation=DEFAULT_MIN_SEPARATION,
    circle_radius_fraction=0.45,
):
    """Generate a random scenario; a pure function of its arguments.

    Placements:
      - ``uniform``: agents and anchors i.i.d. uniform in the square region.
      - ``center-agent``: agents at the region center, anchors uniform.
      - ``fixed-circle``: anchors evenly spaced on a centered circle of radius
        ``circle_radius_fraction * region_side``, agents uniform.
      - ``random-circle``: anchors at i.i.d. uniform angles on the same
        circle, agents at the center.

    When ``eps_d`` is given, anchors are kept at least
    ``max(min_separation, 1.02 * eps_d)`` away from every agent so the derived
    angle uncertainty is well defined, and the disc uncertainty model is
    attached to the scenario.
    """
    if n_agents < 1 or n_anchors < 1:
        raise ValueError("scenario needs at least one agent and one anchor")
    if region_side <= 0.0:
        raise ValueError("region_side must be positive")
    rng = substream(seed, 0)
    half = region_side / 2.0
    radius = circle_radius_fraction * region_side
    agent_sep = min_separation
    if eps_d is not None:
        agent_sep = max(min_separation, _EPS_D_SEPARATION_MARGIN * eps_d)

    if placement == "uniform":
        agents = _place_uniform(rng, n_agents, half, [], min_separation)
    elif placement in ("center-agent", "random-circle"):
        agents = np.zeros((n_agents, 2))
    elif placement == "fixed-circle":
        agents = _place_uniform(rng, n_agents, half, [], min_separation)
    else:
        raise ValueError(f"unknown placement: {placement!r}")

    if placement == "fixed-circle":
        theta = TWO_PI * np.arange(n_anchors) / n_anchors
        anchors = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    elif placement == "random-circle":
        theta = rng.uniform(0.0, TWO_PI, size=n_anchors)
        anchors = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        # Anchors must clear both each other (min_separation) and the agents
        # (agent_sep, possibly widened by eps_d).
        anchors = np.empty((n_anchors, 2))
        placed = []
        for i in range(n_anchors):
            for _ in range(1000):
                p = rng.uniform(-half, half, size=2)
                ok = all(np.hypot(*(p - q)) >= min_separation for q in placed)
                ok = ok and all(np.hypot(*(p - a)) >= agent_sep for a in agents)
                if ok:
                    break
            else:
                raise ValueError("could not place nodes with the requested separation")
            placed.append(p)
            anchors[i] = p

    diff = agents[:, None, :] - anchors[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    xi = _channel_from_rule(channel_rule, dist, rng)

    scenario = NetworkScenario(
        agents=agents,
        anchors=anchors,
        xi=xi,
        p_total=p_total,
        region_side=region_side,
        seed=seed,
    )
    if eps_d is not None or np.any(np.asarray(eps_xi) > 0.0):
        scenario = scenario.with_uncertainty(
            eps_d=eps_d, eps_xi=eps_xi, eps_phi=None if eps_d is not None else 0.0
        )
    return scenario


def scenario_to_json(scenario: NetworkScenario) -> str:
    """Serialize a scenario to the interchange JSON schema."""
    doc = {
        "agents": scenario.agents.tolist(),
        "anchors": scenario.anchors.tolist(),
        "xi": scenario.xi.tolist(),
        "p_total": scenario.p_total,
    }
    unc = scenario.uncertainty
    if unc is not None:
        if unc.eps_d is not None:
            doc["eps_d"] = unc.eps_d
        if np.any(unc.eps_xi > 0.0):
            doc["eps_xi"] = unc.eps_xi.tolist()
    if scenario.anchor_caps is not None:
        doc["per_anchor_caps"] = scenario.anchor_caps.tolist()
    if scenario.seed is not None:
        doc["seed"] = scenario.seed
    return json.dumps(doc)


def scenario_from_json(text: str) -> NetworkScenario:
    """Parse a scenario from the interchange JSON schema."""
    doc = json.loads(text)
    try:
        scenario = NetworkScenario(
            agents=np.asarray(doc["agents"], dtype=float),
            anchors=np.asarray(doc["anchors"], dtype=float),
            xi=np.asarray(doc["xi"], dtype=float),
            p_total=float(doc.get("p_total", 1.0)),
            anchor_caps=doc.get("per_anchor_caps"),
            seed=doc.get("seed"),
        )
    except KeyError as exc:
        raise ValueError(f"scenario JSON missing field {exc}") from exc
    eps_d = doc.get("eps_d")
    eps_xi = doc.get("eps_xi", 0.0)
    if eps_d is not None:
        scenario = scenario.with_uncertainty(eps_d=float(eps_d), eps_xi=np.asarray(eps_xi))
    elif "eps_xi" in doc:
        scenario = scenario.with_uncertainty(eps_phi=0.0, eps_xi=np.asarray(eps_xi))
    return scenario
