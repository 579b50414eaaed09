"""Convex solvers for power allocation over the transmit-power polytope.

All programs minimize a position-error objective (sum or max of per-agent
SPEB/worst-direction bounds, plain or worst-case robust) subject to linear
power constraints, or minimize total power subject to per-agent error targets.
Every problem is solved by one primal log-barrier Newton method working on the
closed 2x2 information-matrix forms: linear constraints get -log(slack)
barriers, the per-agent norm cone gets -log(r^2 - ||z||^2) and the robust
semidefiniteness constraint gets -log(det).  Optimality is certified by the
barrier duality gap and the stationarity residual of the Lagrangian.

An exhaustive grid oracle over the budget simplex validates the solver on
small instances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import fim, robust
from .netmodel import NetworkScenario

# Matrix entry layout used throughout: y = (a, b, d) for [[a, b], [b, d]].
_TVEC = np.array([1.0, 0.0, 1.0])
_DHESS = np.array([[0.0, 0.0, 1.0], [0.0, -2.0, 0.0], [1.0, 0.0, 0.0]])


def _smallest_positive_roots(a, b, c):
    """Elementwise first positive root of a*t^2 + b*t + c = 0 given c > 0.

    Returns +inf where the quadratic stays positive for all t >= 0.  Used for
    fraction-to-boundary steps: c is the current slack, so the first positive
    root is where the slack vanishes along the step direction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    out = np.full(np.broadcast_shapes(a.shape, b.shape, c.shape), np.inf)
    a, b, c = np.broadcast_arrays(a, b, c)
    lin = np.abs(a) <= 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        out[lin & (b < 0.0)] = (-c / b)[lin & (b < 0.0)]
        disc = b * b - 4.0 * a * c
        quad = ~lin & (disc >= 0.0)
        sq = np.sqrt(np.where(quad, disc, 0.0))
        q = -0.5 * (b + np.sign(b + (b == 0.0)) * sq)
        r1 = np.where(quad, q / a, np.inf)
        r2 = np.where(quad & (np.abs(q) > 1e-300), c / q, np.inf)
    r1 = np.where(r1 > 0.0, r1, np.inf)
    r2 = np.where(r2 > 0.0, r2, np.inf)
    out_quad = np.minimum(r1, r2)
    out[quad] = out_quad[quad]
    return out

METRICS = ("speb", "mdpeb", "robust-speb", "robust-mdpeb")

DEFAULT_TOL = 1e-8
FEASIBILITY_TOL = 1e-10


@dataclass(frozen=True)
class FeasibleSet:
    """Linear feasible region for link powers.

    ``p_total`` of None means no total budget (used by the energy-efficient
    program).  ``lower``/``upper`` are optional per-link bounds and
    ``anchor_caps`` optional per-anchor totals.
    """

    p_total: float | None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    anchor_caps: np.ndarray | None = None

    @classmethod
    def from_scenario(cls, scenario: NetworkScenario, include_budget=True):
        return cls(
            p_total=scenario.p_total if include_budget else None,
            lower=scenario.link_lower,
            upper=scenario.link_upper,
            anchor_caps=scenario.anchor_caps,
        )

    def infeasibility_reason(self, shape):
        """None when a strictly interior point exists, else a message."""
        lower = self.lower if self.lower is not None else np.zeros(shape)
        if self.upper is not None and np.any(self.upper <= lower):
            return "per-link bounds have empty interior"
        if self.p_total is not None and np.sum(lower) >= self.p_total:
            return "lower bounds exhaust the power budget"
        if self.anchor_caps is not None:
            if np.any(np.sum(lower, axis=0) >= self.anchor_caps):
                return "lower bounds exhaust a per-anchor cap"
        return None


@dataclass(frozen=True)
class Objective:
    """Objective descriptor: a metric plus an aggregate over agents.

    Aggregates: ``sum`` and ``max`` of the per-agent metric; ``energy`` means
    total transmit power with the metric as a per-agent constraint.
    """

    metric: str  # one of METRICS
    aggregate: str = "sum"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.aggregate not in ("sum", "max", "energy"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


def _parse_objective(objective) -> Objective:
    if isinstance(objective, Objective):
        return objective
    name = str(objective)
    for suffix, agg in (("-sum", "sum"), ("-max", "max")):
        if name.endswith(suffix):
            return Objective(metric=name[: -len(suffix)], aggregate=agg)
    if name.startswith("minmax-"):
        return Objective(metric=name[len("minmax-"):], aggregate="max")
    return Objective(metric=name, aggregate="sum")


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solve.

    ``status`` is one of optimal / infeasible / unbounded-metric / max-iter.
    ``kkt_residual`` is the relative certificate max(stationarity, duality
    gap); when the status is optimal it is at most the requested tolerance.
    """

    status: str
    objective: float
    allocation: fim.PowerAllocation | None
    kkt_residual: float
    iterations: int
    wall_time: float
    kind: str


# ---------------------------------------------------------------------------
# Per-agent model data


class _AgentData:
    """Precomputed coefficient arrays for every agent of a scenario."""

    def __init__(self, scenario: NetworkScenario, robust_mode: bool):
        xi = scenario.worst_xi() if robust_mode else scenario.xi
        phi = scenario.link_angles
        delta = scenario.delta() if robust_mode else np.zeros_like(xi)
        c, s = np.cos(phi), np.sin(phi)
        # y-map: x_k -> (a, b, d) of the (possibly shrunk) information matrix.
        self.gmap = np.stack(
            [xi * (c * c - delta), xi * c * s, xi * (s * s - delta)], axis=-1
        )
        # Norm-cone data: s-coefficients and doubled-angle vectors.
        self.svec = xi * (1.0 - 2.0 * delta)
        self.zvec = np.stack([xi * np.cos(2.0 * phi), xi * np.sin(2.0 * phi)], axis=-1)
        self.n_agents, self.n_anchors = xi.shape
        self.robust = robust_mode

    def degenerate_agents(self):
        """Agents whose anchors are all collinear (angles equal mod pi)."""
        z = self.zvec / np.linalg.norm(self.zvec, axis=-1, keepdims=True)
        spread = np.max(np.linalg.norm(z - z[:, :1, :], axis=-1), axis=1)
        return np.nonzero(spread <= 1e-12)[0]


def _ymap(gmap, x_mat):
    return np.einsum("kjm,kj->km", gmap, x_mat)


def _det_trace_max_step(y, dy):
    """Largest step keeping det > 0 and trace > 0 for all agents."""
    det_a = dy[:, 0] * dy[:, 2] - dy[:, 1] ** 2
    det_b = y[:, 0] * dy[:, 2] + y[:, 2] * dy[:, 0] - 2.0 * y[:, 1] * dy[:, 1]
    det_c = y[:, 0] * y[:, 2] - y[:, 1] ** 2
    step = float(np.min(_smallest_positive_roots(det_a, det_b, det_c)))
    tr_slope = dy[:, 0] + dy[:, 2]
    tr_now = y[:, 0] + y[:, 2]
    neg = tr_slope < 0.0
    if np.any(neg):
        step = min(step, float(np.min(tr_now[neg] / -tr_slope[neg])))
    return step


# ---------------------------------------------------------------------------
# Objective and barrier terms.  Every term exposes value / add_grad /
# add_hess (accumulating scale * derivative into preallocated buffers) and
# in_domain, all over the full variable vector.


class _LinearTerm:
    def __init__(self, coef):
        self.coef = np.asarray(coef, dtype=float)

    def value(self, v):
        return float(self.coef @ v)

    def add_grad(self, v, g, scale):
        g += scale * self.coef

    def add_hess(self, v, H, scale):
        pass

    def in_domain(self, v):
        return True

    def max_step(self, v, d):
        return math.inf


class _TraceInvTerm:
    """sum_k tr(J_k(x)^{-1}) via the y = (a, b, d) closed form."""

    def __init__(self, gmap, n_x):
        self.gmap = gmap
        self.n_agents, self.n_anchors = gmap.shape[:2]
        self.n_x = n_x

    def _y(self, v):
        return _ymap(self.gmap, v[: self.n_x].reshape(self.n_agents, self.n_anchors))

    @staticmethod
    def _parts(y):
        t = y[:, 0] + y[:, 2]
        det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
        dvec = np.stack([y[:, 2], -2.0 * y[:, 1], y[:, 0]], axis=-1)
        return t, det, dvec

    def value(self, v):
        t, det, _ = self._parts(self._y(v))
        return float(np.sum(t / det))

    def _grad_y(self, y):
        t, det, dvec = self._parts(y)
        return _TVEC[None, :] / det[:, None] - (t / det**2)[:, None] * dvec

    def _hess_y(self, y):
        t, det, dvec = self._parts(y)
        cross = _TVEC[None, :, None] * dvec[:, None, :]
        hy = -(cross + np.swapaxes(cross, 1, 2)) / det[:, None, None] ** 2
        hy -= (t / det**2)[:, None, None] * _DHESS[None, :, :]
        hy += (2.0 * t / det**3)[:, None, None] * (
            dvec[:, :, None] * dvec[:, None, :]
        )
        return hy

    def add_grad(self, v, g, scale):
        gy = self._grad_y(self._y(v))
        gx = np.einsum("kjm,km->kj", self.gmap, gy)
        g[: self.n_x] += scale * gx.ravel()

    def add_hess(self, v, H, scale):
        hy = self._hess_y(self._y(v))
        blocks = np.einsum("kim,kmn,kjn->kij", self.gmap, hy, self.gmap)
        nb = self.n_anchors
        for k in range(self.n_agents):
            H[k * nb : (k + 1) * nb, k * nb : (k + 1) * nb] += scale * blocks[k]

    def in_domain(self, v):
        t, det, _ = self._parts(self._y(v))
        return bool(np.all(det > 0.0) and np.all(t > 0.0))

    def max_step(self, v, d):
        y = self._y(v)
        dy = _ymap(self.gmap, d[: self.n_x].reshape(self.n_agents, self.n_anchors))
        return _det_trace_max_step(y, dy)

    def agent_parts(self, v):
        """Per-agent (indices, value, gradient, hessian) for cap barriers."""
        y = self._y(v)
        t, det, _ = self._parts(y)
        vals = t / det
        gy = self._grad_y(y)
        hy = self._hess_y(y)
        gx = np.einsum("kjm,km->kj", self.gmap, gy)
        blocks = np.einsum("kim,kmn,kjn->kij", self.gmap, hy, self.gmap)
        nb = self.n_anchors
        out = []
        for k in range(self.n_agents):
            idx = np.arange(k * nb, (k + 1) * nb)
            out.append((idx, float(vals[k]), gx[k], blocks[k]))
        return out


class _RecipTerm:
    """sum_k nu_k / (s_k(x) - r_k), the worst-direction objective."""

    def __init__(self, svec, n_x, r_offset=None, nu=2.0):
        self.svec = svec
        self.n_agents, self.n_anchors = svec.shape
        self.n_x = n_x
        self.r_offset = r_offset  # r_k lives at v[r_offset + k]; None means r = 0
        self.nu = np.broadcast_to(np.asarray(nu, dtype=float), (self.n_agents,))

    def _den(self, v):
        x = v[: self.n_x].reshape(self.n_agents, self.n_anchors)
        s = np.einsum("kj,kj->k", self.svec, x)
        if self.r_offset is not None:
            s = s - v[self.r_offset : self.r_offset + self.n_agents]
        return s

    def value(self, v):
        return float(np.sum(self.nu / self._den(v)))

    def add_grad(self, v, g, scale):
        den = self._den(v)
        coef = scale * self.nu / den**2
        g[: self.n_x] += (-coef[:, None] * self.svec).ravel()
        if self.r_offset is not None:
            g[self.r_offset : self.r_offset + self.n_agents] += coef

    def add_hess(self, v, H, scale):
        den = self._den(v)
        coef = 2.0 * scale * self.nu / den**3
        nb = self.n_anchors
        for k in range(self.n_agents):
            w = self.svec[k]
            blk = coef[k] * np.outer(w, w)
            sl = slice(k * nb, (k + 1) * nb)
            H[sl, sl] += blk
            if self.r_offset is not None:
                ri = self.r_offset + k
                H[sl, ri] += -coef[k] * w
                H[ri, sl] += -coef[k] * w
                H[ri, ri] += coef[k]

    def in_domain(self, v):
        return bool(np.all(self._den(v) > 0.0))

    def max_step(self, v, d):
        den = self._den(v)
        dden = self._den(d)  # den is linear in v
        neg = dden < 0.0
        if not np.any(neg):
            return math.inf
        return float(np.min(den[neg] / -dden[neg]))

    def agent_parts(self, v):
        den = self._den(v)
        nb = self.n_anchors
        out = []
        for k in range(self.n_agents):
            if self.r_offset is not None:
                idx = np.concatenate(
                    [np.arange(k * nb, (k + 1) * nb), [self.r_offset + k]]
                )
                w = np.concatenate([self.svec[k], [-1.0]])
            else:
                idx = np.arange(k * nb, (k + 1) * nb)
                w = self.svec[k].copy()
            val = self.nu[k] / den[k]
            grad = -self.nu[k] / den[k] ** 2 * w
            hess = 2.0 * self.nu[k] / den[k] ** 3 * np.outer(w, w)
            out.append((idx, float(val), grad, hess))
        return out


class _BoxBarrier:
    """-log barriers for elementwise bounds lo < v[idx] < hi."""

    def __init__(self, idx, lower, upper=None):
        self.idx = np.asarray(idx)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        if self.upper is not None:
            self.finite_upper = np.isfinite(self.upper)
        theta = self.idx.size
        if self.upper is not None:
            theta += int(np.count_nonzero(self.finite_upper))
        self.theta = theta

    def value(self, v):
        lo_slack = v[self.idx] - self.lower
        out = -np.sum(np.log(lo_slack))
        if self.upper is not None and np.any(self.finite_upper):
            out -= np.sum(np.log((self.upper - v[self.idx])[self.finite_upper]))
        return float(out)

    def add_grad(self, v, g, scale):
        lo_slack = v[self.idx] - self.lower
        contrib = -1.0 / lo_slack
        if self.upper is not None and np.any(self.finite_upper):
            hi_slack = self.upper - v[self.idx]
            contrib = contrib + np.where(self.finite_upper, 1.0 / hi_slack, 0.0)
        np.add.at(g, self.idx, scale * contrib)

    def add_hess(self, v, H, scale):
        lo_slack = v[self.idx] - self.lower
        contrib = 1.0 / lo_slack**2
        if self.upper is not None and np.any(self.finite_upper):
            hi_slack = self.upper - v[self.idx]
            contrib = contrib + np.where(self.finite_upper, 1.0 / hi_slack**2, 0.0)
        H[self.idx, self.idx] += scale * contrib

    def in_domain(self, v):
        if np.any(v[self.idx] <= self.lower):
            return False
        if self.upper is not None and np.any(v[self.idx][self.finite_upper] >= self.upper[self.finite_upper]):
            return False
        return True

    def max_step(self, v, d):
        dv = d[self.idx]
        step = math.inf
        falling = dv < 0.0
        if np.any(falling):
            step = float(np.min((v[self.idx] - self.lower)[falling] / -dv[falling]))
        if self.upper is not None:
            rising = (dv > 0.0) & self.finite_upper
            if np.any(rising):
                step = min(step, float(np.min((self.upper - v[self.idx])[rising] / dv[rising])))
        return step


class _AffineBarrier:
    """-log(bound - coef @ v[idx]) for one halfspace."""

    theta = 1

    def __init__(self, idx, coef, bound):
        self.idx = np.asarray(idx)
        self.coef = np.asarray(coef, dtype=float)
        self.bound = float(bound)

    def _slack(self, v):
        return self.bound - float(self.coef @ v[self.idx])

    def value(self, v):
        return -math.log(self._slack(v))

    def add_grad(self, v, g, scale):
        np.add.at(g, self.idx, scale * self.coef / self._slack(v))

    def add_hess(self, v, H, scale):
        w = self.coef / self._slack(v)
        H[np.ix_(self.idx, self.idx)] += scale * np.outer(w, w)

    def in_domain(self, v):
        return self._slack(v) > 0.0

    def max_step(self, v, d):
        rate = float(self.coef @ d[self.idx])
        if rate <= 0.0:
            return math.inf
        return self._slack(v) / rate


class _SocBarrier:
    """-log(r_k^2 - ||z_k(x)||^2) per agent, z_k = sum_j x_kj zvec_kj."""

    def __init__(self, zvec, n_x, r_offset):
        self.zvec = zvec
        self.n_agents, self.n_anchors = zvec.shape[:2]
        self.n_x = n_x
        self.r_offset = r_offset
        self.theta = 2 * self.n_agents

    def _zr(self, v):
        x = v[: self.n_x].reshape(self.n_agents, self.n_anchors)
        z = np.einsum("kjm,kj->km", self.zvec, x)
        r = v[self.r_offset : self.r_offset + self.n_agents]
        return z, r

    def value(self, v):
        z, r = self._zr(v)
        h = r**2 - np.sum(z**2, axis=1)
        return float(-np.sum(np.log(h)))

    def add_grad(self, v, g, scale):
        z, r = self._zr(v)
        h = r**2 - np.sum(z**2, axis=1)
        # dh/dx_j = -2 z . zvec_j ; dh/dr = 2 r
        dhx = -2.0 * np.einsum("kjm,km->kj", self.zvec, z)
        g[: self.n_x] += scale * (-dhx / h[:, None]).ravel()
        g[self.r_offset : self.r_offset + self.n_agents] += scale * (-2.0 * r / h)

    def add_hess(self, v, H, scale):
        z, r = self._zr(v)
        h = r**2 - np.sum(z**2, axis=1)
        dhx = -2.0 * np.einsum("kjm,km->kj", self.zvec, z)
        gram = np.einsum("kim,kjm->kij", self.zvec, self.zvec)
        nb = self.n_anchors
        for k in range(self.n_agents):
            sl = slice(k * nb, (k + 1) * nb)
            ri = self.r_offset + k
            w = dhx[k]
            H[sl, sl] += scale * (np.outer(w, w) / h[k] ** 2 + 2.0 * gram[k] / h[k])
            cross = scale * (w * (2.0 * r[k])) / h[k] ** 2
            H[sl, ri] += cross
            H[ri, sl] += cross
            H[ri, ri] += scale * ((2.0 * r[k]) ** 2 / h[k] ** 2 - 2.0 / h[k])

    def in_domain(self, v):
        z, r = self._zr(v)
        if np.any(r <= 0.0):
            return False
        return bool(np.all(r**2 - np.sum(z**2, axis=1) > 0.0))

    def max_step(self, v, d):
        z, r = self._zr(v)
        dz, dr = self._zr(d)  # both maps are linear in v
        a = dr**2 - np.sum(dz**2, axis=1)
        b = 2.0 * (r * dr - np.sum(z * dz, axis=1))
        c = r**2 - np.sum(z**2, axis=1)
        step = float(np.min(_smallest_positive_roots(a, b, c)))
        falling = dr < 0.0
        if np.any(falling):
            step = min(step, float(np.min(r[falling] / -dr[falling])))
        return step


class _LogDetBarrier:
    """-log det(J_k(x)) per agent; keeps the robust surrogate positive definite."""

    def __init__(self, gmap, n_x):
        self.gmap = gmap
        self.n_agents, self.n_anchors = gmap.shape[:2]
        self.n_x = n_x
        self.theta = 2 * self.n_agents

    def _y(self, v):
        return _ymap(self.gmap, v[: self.n_x].reshape(self.n_agents, self.n_anchors))

    def value(self, v):
        y = self._y(v)
        det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
        return float(-np.sum(np.log(det)))

    def add_grad(self, v, g, scale):
        y = self._y(v)
        det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
        dvec = np.stack([y[:, 2], -2.0 * y[:, 1], y[:, 0]], axis=-1)
        gy = -dvec / det[:, None]
        g[: self.n_x] += scale * np.einsum("kjm,km->kj", self.gmap, gy).ravel()

    def add_hess(self, v, H, scale):
        y = self._y(v)
        det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
        dvec = np.stack([y[:, 2], -2.0 * y[:, 1], y[:, 0]], axis=-1)
        hy = (dvec[:, :, None] * dvec[:, None, :]) / det[:, None, None] ** 2
        hy -= _DHESS[None, :, :] / det[:, None, None]
        blocks = np.einsum("kim,kmn,kjn->kij", self.gmap, hy, self.gmap)
        nb = self.n_anchors
        for k in range(self.n_agents):
            sl = slice(k * nb, (k + 1) * nb)
            H[sl, sl] += scale * blocks[k]

    def in_domain(self, v):
        y = self._y(v)
        det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
        tr = y[:, 0] + y[:, 2]
        return bool(np.all(det > 0.0) and np.all(tr > 0.0))

    def max_step(self, v, d):
        y = self._y(v)
        dy = _ymap(self.gmap, d[: self.n_x].reshape(self.n_agents, self.n_anchors))
        return _det_trace_max_step(y, dy)


class _MetricCapBarrier:
    """-log(gamma_k - metric_k(v)) per agent.

    ``gamma`` is either a fixed per-agent array (energy program) or the index
    of a shared epigraph variable (min-max program).
    """

    def __init__(self, metric_term, gamma=None, gamma_idx=None):
        self.metric = metric_term
        self.gamma = None if gamma is None else np.asarray(gamma, dtype=float)
        self.gamma_idx = gamma_idx
        self.theta = metric_term.n_agents

    def _gammas(self, v):
        if self.gamma_idx is not None:
            return np.full(self.metric.n_agents, v[self.gamma_idx])
        return self.gamma

    def value(self, v):
        gam = self._gammas(v)
        out = 0.0
        for k, (_, val, _, _) in enumerate(self.metric.agent_parts(v)):
            out -= math.log(gam[k] - val)
        return out

    def add_grad(self, v, g, scale):
        gam = self._gammas(v)
        for k, (idx, val, grad, _) in enumerate(self.metric.agent_parts(v)):
            h = gam[k] - val
            g[idx] += scale * grad / h
            if self.gamma_idx is not None:
                g[self.gamma_idx] += -scale / h

    def add_hess(self, v, H, scale):
        gam = self._gammas(v)
        for k, (idx, val, grad, hess) in enumerate(self.metric.agent_parts(v)):
            h = gam[k] - val
            H[np.ix_(idx, idx)] += scale * (np.outer(grad, grad) / h**2 + hess / h)
            if self.gamma_idx is not None:
                cross = -scale * grad / h**2
                H[idx, self.gamma_idx] += cross
                H[self.gamma_idx, idx] += cross
                H[self.gamma_idx, self.gamma_idx] += scale / h**2

    def in_domain(self, v):
        if not self.metric.in_domain(v):
            return False
        gam = self._gammas(v)
        for k, (_, val, _, _) in enumerate(self.metric.agent_parts(v)):
            if gam[k] - val <= 0.0:
                return False
        return True

    def max_step(self, v, d):
        # The cap slack is not polynomial in the step; backtracking handles it.
        return self.metric.max_step(v, d)


# ---------------------------------------------------------------------------
# Newton barrier engine


class _BarrierResult:
    def __init__(self, v, objective, kkt, iterations, converged):
        self.v = v
        self.objective = objective
        self.kkt = kkt
        self.iterations = iterations
        self.converged = converged


def _total_value(terms, v):
    return sum(term.value(v) for term in terms)


def _in_domain(obj_terms, bar_terms, v):
    return all(t.in_domain(v) for t in obj_terms) and all(
        t.in_domain(v) for t in bar_terms
    )


def _assemble(obj_terms, bar_terms, v, t, n):
    g = np.zeros(n)
    H = np.zeros((n, n))
    for term in obj_terms:
        term.add_grad(v, g, t)
        term.add_hess(v, H, t)
    for term in bar_terms:
        term.add_grad(v, g, 1.0)
        term.add_hess(v, H, 1.0)
    return g, H

def _newton_direction(H, g):
    """Jacobi-scaled Newton solve with ridge fallback."""
    diag = np.maximum(np.diag(H), 1e-300)
    d = 1.0 / np.sqrt(diag)
    Hs = H * d[:, None] * d[None, :]
    gs = g * d
    ridge = 0.0
    eye = np.eye(len(g))
    for _ in range(5):
        try:
            step = np.linalg.solve(Hs + ridge * eye, -gs)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.all(np.isfinite(step)) and gs @ step < 0.0:
            return step * d
        ridge = max(ridge * 100.0, 1e-12)
    return None


def _center(obj_terms, bar_terms, v, t, inner_tol, max_iter=60):
    """Newton iterations for min t*f + barrier at fixed t.

    Returns the iterate, the step count and the last squared Newton decrement
    (the affine-invariant distance to the exact center).
    """
    n = v.size
    steps = 0
    lam2 = math.inf
    all_terms = obj_terms + bar_terms
    for _ in range(max_iter):
        g, H = _assemble(obj_terms, bar_terms, v, t, n)
        direction = _newton_direction(H, g)
        if direction is None:
            break
        lam2 = -float(g @ direction)
        if lam2 <= 2.0 * inner_tol:
            break
        phi0 = t * _total_value(obj_terms, v) + _total_value(bar_terms, v)
        slope = float(g @ direction)
        boundary = min(term.max_step(v, direction) for term in all_terms)
        alpha = min(1.0, 0.99 * boundary)
        accepted = False
        while alpha > 1e-14:
            vn = v + alpha * direction
            if _in_domain(obj_terms, bar_terms, vn):
                phin = t * _total_value(obj_terms, vn) + _total_value(bar_terms, vn)
                if phin <= phi0 + 0.25 * alpha * slope:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # Line search exhausted: at the floating-point floor of this stage.
            break
        v = vn
        steps += 1
    return v, steps, max(lam2, 0.0)


def _solve_barrier(obj_terms, bar_terms, v0, tol, mu=80.0, max_outer=60):
    """Path-following loop with a duality-gap optimality certificate.

    At an approximate center with Newton decrement lam the suboptimality is at
    most (theta + lam*sqrt(theta))/t, which is the reported KKT residual
    (relative to max(1, |f|)).
    """
    theta = sum(term.theta for term in bar_terms)
    if not _in_domain(obj_terms, bar_terms, v0):
        raise ValueError("initial point is not strictly feasible")
    v = v0.copy()
    f0 = abs(_total_value(obj_terms, v))
    t = min(max(theta / max(f0, 1e-8), 1e-6), 1e3)
    total_steps = 0
    # Loose centering suffices: the gap certificate inflates by only
    # lam*sqrt(theta)/t for an approximate center with Newton decrement lam.
    lam2 = math.inf
    for _ in range(max_outer):
        v, steps, lam2 = _center(obj_terms, bar_terms, v, t, inner_tol=1e-5)
        total_steps += steps
        f = _total_value(obj_terms, v)
        if theta / t <= 0.4 * tol * max(1.0, abs(f)):
            break
        t *= mu
    f = _total_value(obj_terms, v)
    lam = math.sqrt(lam2) if lam2 < 1.0 else 1.0
    kkt = (theta + lam * math.sqrt(theta)) / t / max(1.0, abs(f))
    converged = kkt <= tol and lam2 <= 0.01
    return _BarrierResult(v, f, kkt, total_steps, converged=converged)


# ---------------------------------------------------------------------------
# Program assembly


def _linear_barriers(feasible: FeasibleSet, n_agents, n_anchors, n_var):
    n_x = n_agents * n_anchors
    shape = (n_agents, n_anchors)
    lower = feasible.lower if feasible.lower is not None else np.zeros(shape)
    upper = feasible.upper
    bars = [
        _BoxBarrier(
            np.arange(n_x),
            lower.ravel(),
            None if upper is None else upper.ravel(),
        )
    ]
    if feasible.p_total is not None:
        bars.append(_AffineBarrier(np.arange(n_x), np.ones(n_x), feasible.p_total))
    if feasible.anchor_caps is not None:
        for j in range(n_anchors):
            idx = np.arange(j, n_x, n_anchors)
            bars.append(_AffineBarrier(idx, np.ones(n_agents), feasible.anchor_caps[j]))
    return bars


def _interior_allocation(feasible: FeasibleSet, n_agents, n_anchors):
    """A strictly interior point of the linear feasible set, or None."""
    shape = (n_agents, n_anchors)
    lower = feasible.lower if feasible.lower is not None else np.zeros(shape)
    n = n_agents * n_anchors
    if feasible.p_total is not None:
        slack = feasible.p_total - float(np.sum(lower))
        base = np.full(shape, slack / n)
    else:
        base = np.ones(shape)
    beta = 0.99
    for _ in range(60):
        x = lower + beta * base
        ok = True
        if feasible.upper is not None and np.any(x >= feasible.upper):
            ok = False
        if ok and feasible.p_total is not None and np.sum(x) >= feasible.p_total:
            ok = False
        if ok and feasible.anchor_caps is not None:
            if np.any(np.sum(x, axis=0) >= feasible.anchor_caps):
                ok = False
        if ok:
            return x
        beta *= 0.5
    return None


def _phase1_direction(svec_row, zvec_row, tol=1e-7):
    """Unit-budget anchor fractions making the robust surrogate positive
    definite for one agent, or None when no such fractions exist.

    Maximizes the surrogate's smaller eigenvalue over the fraction simplex via
    the epigraph form: minimize q - s(rho) with q >= ||z(rho)||.
    """
    nb = svec_row.size
    n_var = nb + 1
    coef = np.concatenate([-svec_row, [1.0]])
    obj = [_LinearTerm(coef)]
    bars = [
        _BoxBarrier(np.arange(nb), np.zeros(nb)),
        _AffineBarrier(np.arange(nb), np.ones(nb), 1.0),
        _SocBarrier(zvec_row[None, :, :], nb, r_offset=nb),
    ]
    rho0 = np.full(nb, 0.5 / nb)
    z0 = zvec_row.T @ rho0
    q0 = 2.0 * float(np.hypot(*z0)) + 0.1 * (1.0 + abs(float(svec_row @ rho0)))
    v0 = np.concatenate([rho0, [q0]])
    result = _solve_barrier(obj, bars, v0, tol)
    scale = max(1.0, float(np.max(np.abs(svec_row))))
    if result.objective >= -1e-9 * scale:
        return None
    rho = result.v[:nb]
    return rho / float(np.sum(rho))


class _ProgramSpec:
    """Assembled barrier program plus metadata for reporting."""

    def __init__(self, obj_terms, bar_terms, v0, n_x, shape, budgeted):
        self.obj_terms = obj_terms
        self.bar_terms = bar_terms
        self.v0 = v0
        self.n_x = n_x
        self.shape = shape
        self.budgeted = budgeted


def _repair_psd_interior(x0, data: _AgentData, check_domain):
    """Replace rows of x0 by phase-one directions until the robust domain holds."""
    total = float(np.sum(x0))
    share = total / data.n_agents
    for k in range(data.n_agents):
        if check_domain(k, x0):
            continue
        rho = _phase1_direction(data.svec[k], data.zvec[k])
        if rho is None:
            return None
        x0[k] = rho * share
    return x0


def _build_metric_program(scenario, objective: Objective, feasible, gammas=None):
    """Assemble the barrier program for any metric objective.

    Returns (spec, status): status is None when a program was built, else the
    terminal status string (infeasible / unbounded-metric).
    """
    metric = objective.metric
    robust_mode = metric.startswith("robust")
    mdpeb_mode = metric.endswith("mdpeb")
    energy_mode = objective.aggregate == "energy"
    minmax_mode = objective.aggregate == "max"

    na, nb = scenario.n_agents, scenario.n_anchors
    reason = feasible.infeasibility_reason((na, nb))
    if reason is not None:
        return None, "infeasible"

    data = _AgentData(scenario, robust_mode)
    eps_all_zero = not robust_mode or (
        scenario.uncertainty is None
        or (
            not np.any(scenario.uncertainty.eps_phi > 0.0)
        )
    )
    if eps_all_zero and len(data.degenerate_agents()) > 0:
        return None, "unbounded-metric"

    n_x = na * nb
    n_var = n_x
    r_offset = None
    if mdpeb_mode:
        r_offset = n_var
        n_var += na
    gamma_idx = None
    if minmax_mode:
        gamma_idx = n_var
        n_var += 1

    x0 = _interior_allocation(feasible, na, nb)
    if x0 is None:
        return None, "infeasible"

    if robust_mode:
        if mdpeb_mode:
            def check(k, x):
                s = float(data.svec[k] @ x[k])
                z = data.zvec[k].T @ x[k]
                return s - float(np.hypot(*z)) > 0.0
        else:
            def check(k, x):
                y = data.gmap[k].T @ x[k]
                return y[0] + y[2] > 0.0 and y[0] * y[2] - y[1] ** 2 > 0.0

        x0 = _repair_psd_interior(x0, data, check)
        if x0 is None:
            return None, "infeasible"

    if energy_mode:
        # No budget: scale the interior point up until every target has room.
        for _ in range(200):
            vals = _metric_values(data, x0, mdpeb_mode)
            if np.all(np.isfinite(vals)) and np.all(vals < 0.75 * gammas):
                break
            grown = x0 * 2.0
            if feasible.upper is not None:
                grown = np.minimum(grown, 0.5 * (x0 + feasible.upper))
            if np.allclose(grown, x0):
                return None, "infeasible"
            x0 = grown
        else:
            return None, "infeasible"

    v0 = np.zeros(n_var)
    v0[:n_x] = x0.ravel()
    if mdpeb_mode:
        x_mat = x0
        s = np.einsum("kj,kj->k", data.svec, x_mat)
        z = np.einsum("kjm,kj->km", data.zvec, x_mat)
        v0[r_offset : r_offset + na] = 0.5 * (s + np.hypot(z[:, 0], z[:, 1]))

    bars = _linear_barriers(feasible, na, nb, n_var)
    if mdpeb_mode:
        bars.append(_SocBarrier(data.zvec, n_x, r_offset))
        metric_term = _RecipTerm(data.svec, n_x, r_offset, nu=2.0)
    else:
        metric_term = _TraceInvTerm(data.gmap, n_x)
        if robust_mode:
            bars.append(_LogDetBarrier(data.gmap, n_x))

    if minmax_mode:
        obj_terms = [_LinearTerm(np.eye(n_var)[gamma_idx])]
        parts = metric_term.agent_parts(v0)
        worst = max(p[1] for p in parts)
        v0[gamma_idx] = 2.0 * worst + 1e-6
        bars.append(_MetricCapBarrier(metric_term, gamma_idx=gamma_idx))
    elif energy_mode:
        coef = np.zeros(n_var)
        coef[:n_x] = 1.0
        obj_terms = [_LinearTerm(coef)]
        bars.append(_MetricCapBarrier(metric_term, gamma=gammas))
    else:
        obj_terms = [metric_term]

    spec = _ProgramSpec(
        obj_terms, bars, v0, n_x, (na, nb), budgeted=feasible.p_total is not None
    )
    return spec, None


def _metric_values(data: _AgentData, x_mat, mdpeb_mode):
    """Per-agent metric values of an allocation under the data's coefficients."""
    if mdpeb_mode:
        s = np.einsum("kj,kj->k", data.svec, x_mat)
        z = np.einsum("kjm,kj->km", data.zvec, x_mat)
        mu2 = 0.5 * (s - np.hypot(z[:, 0], z[:, 1]))
        return np.where(mu2 > 0.0, 1.0 / np.maximum(mu2, 1e-300), np.inf)
    y = _ymap(data.gmap, x_mat)
    tr = y[:, 0] + y[:, 2]
    det = y[:, 0] * y[:, 2] - y[:, 1] ** 2
    good = (det > fim.DET_TOL * np.maximum(1.0, tr**2)) & (tr > 0.0)
    return np.where(good, tr / np.where(good, det, 1.0), np.inf)


def allocation_objective(scenario, alloc, objective) -> float:
    """Objective value of an allocation, from the closed-form metrics."""
    objective = _parse_objective(objective)
    data = _AgentData(scenario, objective.metric.startswith("robust"))
    x = alloc.x if isinstance(alloc, fim.PowerAllocation) else np.asarray(alloc)
    vals = _metric_values(data, x, objective.metric.endswith("mdpeb"))
    if objective.aggregate == "max":
        return float(np.max(vals))
    return float(np.sum(vals))


def _saturate_budget(x, feasible: FeasibleSet):
    """Scale the allocation up until the tightest upper constraint is active.

    Valid for the error-bound objectives, which strictly improve with scale.
    """
    total = float(np.sum(x))
    if feasible.p_total is None or total <= 0.0:
        return x
    scale = feasible.p_total / total
    if feasible.anchor_caps is not None:
        col = np.sum(x, axis=0)
        pos = col > 0.0
        if np.any(pos):
            scale = min(scale, float(np.min(feasible.anchor_caps[pos] / col[pos])))
    if feasible.upper is not None:
        pos = x > 0.0
        if np.any(pos):
            scale = min(scale, float(np.min(feasible.upper[pos] / x[pos])))
    if scale > 1.0:
        x = x * scale
    return x


def _run_program(scenario, objective: Objective, feasible, tol, gammas=None):
    start = time.perf_counter()
    spec, status = _build_metric_program(scenario, objective, feasible, gammas)
    if status is not None:
        return SolveReport(
            status=status,
            objective=math.inf,
            allocation=None,
            kkt_residual=math.inf,
            iterations=0,
            wall_time=time.perf_counter() - start,
            kind=_kind_name(objective),
        )
    result = _solve_barrier(spec.obj_terms, spec.bar_terms, spec.v0, tol)
    x = result.v[: spec.n_x].reshape(spec.shape)
    if objective.aggregate != "energy" and spec.budgeted:
        x = _saturate_budget(x, feasible)
    alloc = fim.PowerAllocation(x)
    if objective.aggregate == "energy":
        value = float(np.sum(x))
    else:
        value = allocation_objective(scenario, alloc, objective)
    return SolveReport(
        status="optimal" if result.converged else "max-iter",
        objective=value,
        allocation=alloc,
        kkt_residual=result.kkt,
        iterations=result.iterations,
        wall_time=time.perf_counter() - start,
        kind=_kind_name(objective),
    )


def _kind_name(objective: Objective):
    if objective.aggregate == "sum":
        return objective.metric
    if objective.aggregate == "max":
        return f"minmax-{objective.metric}"
    return f"energy-{objective.metric}"


def _require_uncertainty(scenario):
    if scenario.uncertainty is None:
        raise ValueError("scenario has no uncertainty model")


def solve_speb(scenario, feasible_set=None, tol=DEFAULT_TOL) -> SolveReport:
    """Minimize the total SPEB over the power polytope."""
    feasible = feasible_set or FeasibleSet.from_scenario(scenario)
    return _run_program(scenario, Objective("speb"), feasible, tol)


def solve_mdpeb(scenario, feasible_set=None, tol=DEFAULT_TOL) -> SolveReport:
    """Minimize the total worst-direction bound (1/mu2 summed over agents)."""
    feasible = feasible_set or FeasibleSet.from_scenario(scenario)
    return _run_program(scenario, Objective("mdpeb"), feasible, tol)


def solve_robust_speb(scenario, feasible_set=None, tol=DEFAULT_TOL) -> SolveReport:
    """Minimize the worst-case SPEB surrogate under parameter uncertainty."""
    _require_uncertainty(scenario)
    feasible = feasible_set or FeasibleSet.from_scenario(scenario)
    return _run_program(scenario, Objective("robust-speb"), feasible, tol)


def solve_robust_mdpeb(scenario, feasible_set=None, tol=DEFAULT_TOL) -> SolveReport:
    """Minimize the worst-case worst-direction surrogate under uncertainty."""
    _require_uncertainty(scenario)
    feasible = feasible_set or FeasibleSet.from_scenario(scenario)
    return _run_program(scenario, Objective("robust-mdpeb"), feasible, tol)


def solve_energy_min(scenario, qos, metric="speb", tol=DEFAULT_TOL) -> SolveReport:
    """Minimize total transmit power subject to per-agent error targets."""
    gammas = np.broadcast_to(np.asarray(qos, dtype=float), (scenario.n_agents,)).copy()
    if np.any(gammas <= 0.0):
        raise ValueError("QoS targets must be positive")
    if metric.startswith("robust"):
        _require_uncertainty(scenario)
    feasible = FeasibleSet.from_scenario(scenario, include_budget=False)
    objective = Objective(metric, aggregate="energy")
    return _run_program(scenario, objective, feasible, tol, gammas=gammas)


def solve_minmax(scenario, feasible_set=None, metric="speb", tol=DEFAULT_TOL) -> SolveReport:
    """Minimize the maximum per-agent error bound."""
    if metric.startswith("robust"):
        _require_uncertainty(scenario)
    feasible = feasible_set or FeasibleSet.from_scenario(scenario)
    return _run_program(scenario, Objective(metric, aggregate="max"), feasible, tol)


# ---------------------------------------------------------------------------
# Exhaustive grid oracle


@dataclass(frozen=True)
class OracleResult:
    allocation: fim.PowerAllocation
    objective: float


_GRID_CACHE: dict = {}


def _budget_face_grid(n, p_total, step):
    """All lattice allocations on the face sum(x) = p_total, shape (m, n).

    For a halved step the grid is a superset of the coarser one, so refining
    never increases the best objective.
    """
    key = (n, float(p_total), float(step))
    cached = _GRID_CACHE.get(key)
    if cached is not None:
        return cached
    m = int(math.floor(p_total / step + 1e-9))
    vals = np.arange(m + 1) * step
    if n == 1:
        pts = np.full((1, 1), p_total)
    elif n == 2:
        pts = np.column_stack([vals, p_total - vals])
    elif n == 3:
        g1, g2 = np.meshgrid(vals, vals, indexing="ij")
        mask = g1 + g2 <= p_total + 1e-12
        x1, x2 = g1[mask], g2[mask]
        pts = np.column_stack([x1, x2, p_total - x1 - x2])
    else:
        raise ValueError("cached grids supported up to 3 variables")
    if len(_GRID_CACHE) > 8:
        _GRID_CACHE.clear()
    _GRID_CACHE[key] = pts
    return pts


def _grid_objective_values(data: _AgentData, objective: Objective, x_pts):
    """Vectorized objective over allocation rows (n_points, n_links).

    Allocations with a singular (or indefinite, for the robust surrogates)
    information matrix evaluate to +inf; near-singular ones produce huge
    finite values, which never win the minimum.
    """
    na, nb = data.n_agents, data.n_anchors
    mdpeb_mode = objective.metric.endswith("mdpeb")
    total = None
    for k in range(na):
        xk = x_pts[:, k * nb : (k + 1) * nb]
        if mdpeb_mode:
            # Nonpositive mu2 turns into a huge positive value via the floor,
            # which never wins the argmin; no separate mask needed.
            s = xk @ np.ascontiguousarray(data.svec[k])
            z0 = xk @ np.ascontiguousarray(data.zvec[k, :, 0])
            z1 = xk @ np.ascontiguousarray(data.zvec[k, :, 1])
            mu2 = np.hypot(z0, z1, out=z0)
            np.subtract(s, mu2, out=mu2)
            mu2 *= 0.5
            np.maximum(mu2, 1e-300, out=mu2)
            vals = np.divide(1.0, mu2, out=mu2)
        else:
            a = xk @ np.ascontiguousarray(data.gmap[k, :, 0])
            b = xk @ np.ascontiguousarray(data.gmap[k, :, 1])
            d = xk @ np.ascontiguousarray(data.gmap[k, :, 2])
            det = a * d
            b *= b
            det -= b
            tr = np.add(a, d, out=a)
            if data.robust:
                # An indefinite surrogate can have tr <= 0 with det > 0,
                # which would fake a (negative) objective value.
                bad = det <= 0.0
                bad |= tr <= 0.0
            else:
                bad = None  # PSD: det <= 0 only on the floor, harmless
            np.maximum(det, 1e-300, out=det)
            vals = np.divide(tr, det, out=det)
            if bad is not None:
                np.copyto(vals, np.inf, where=bad)
        if total is None:
            total = vals
        elif objective.aggregate == "max":
            np.maximum(total, vals, out=total)
        else:
            total += vals
    return total


def _grid_feasible_mask(scenario, x_pts):
    """Boolean mask of bound/cap-feasible rows, or None when unconstrained."""
    if (
        scenario.link_lower is None
        and scenario.link_upper is None
        and scenario.anchor_caps is None
    ):
        return None
    mask = np.ones(x_pts.shape[0], dtype=bool)
    nb = scenario.n_anchors
    if scenario.link_lower is not None:
        mask &= np.all(x_pts >= scenario.link_lower.ravel()[None, :] - 1e-12, axis=1)
    if scenario.link_upper is not None:
        mask &= np.all(x_pts <= scenario.link_upper.ravel()[None, :] + 1e-12, axis=1)
    if scenario.anchor_caps is not None:
        for j in range(nb):
            mask &= (
                np.sum(x_pts[:, j::nb], axis=1) <= scenario.anchor_caps[j] + 1e-12
            )
    return mask


def oracle_grid(scenario, objective, grid_step) -> OracleResult:
    """Exhaustive search over the discretized budget simplex.

    The budget face sum(x) = p_total is enumerated with the given step (the
    error-bound objectives strictly improve with total power, so the optimum
    lies on that face).  Instances are limited to four decision variables.
    """
    if grid_step <= 0.0:
        raise ValueError("grid_step must be positive")
    objective = _parse_objective(objective)
    n = scenario.n_agents * scenario.n_anchors
    if n > 4:
        raise ValueError("oracle_grid supports at most 4 decision variables")
    p = scenario.p_total
    data = _AgentData(scenario, objective.metric.startswith("robust"))

    best_val = math.inf
    best_x = None

    def consider(x_pts):
        nonlocal best_val, best_x
        mask = _grid_feasible_mask(scenario, x_pts)
        if mask is not None:
            x_pts = x_pts[mask]
            if x_pts.shape[0] == 0:
                return
        vals = _grid_objective_values(data, objective, x_pts)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val = float(vals[i])
            best_x = x_pts[i].copy()

    if n <= 3:
        consider(_budget_face_grid(n, p, grid_step))
    else:
        # Four variables: sweep the first coordinate, vectorize the rest.
        m = int(math.floor(p / grid_step + 1e-9))
        base = _budget_face_grid(3, p, grid_step)  # rows sum to p
        sums = p - base[:, 2]  # sum of the two free coordinates
        for i in range(m + 1):
            x1 = i * grid_step
            rem = p - x1
            keep = sums <= rem + 1e-12
            sub = base[keep]
            pts = np.empty((sub.shape[0], 4))
            pts[:, 0] = x1
            pts[:, 1:3] = sub[:, :2]
            pts[:, 3] = rem - sums[keep]
            consider(pts)

    if best_x is None:
        raise ValueError("no feasible grid point")
    alloc = fim.PowerAllocation(best_x.reshape(scenario.n_agents, scenario.n_anchors))
    return OracleResult(allocation=alloc, objective=best_val)
