import math

import numpy as np
import pytest

from locpower import solver
from locpower.fim import PowerAllocation, uniform_allocation
from locpower.netmodel import NetworkScenario, generate_scenario
from locpower.solver import (
    FeasibleSet,
    Objective,
    allocation_objective,
    oracle_grid,
    solve_energy_min,
    solve_mdpeb,
    solve_minmax,
    solve_robust_mdpeb,
    solve_robust_speb,
    solve_speb,
)


def scenario_with_angles(angles, xi, p_total=1.0, eps_phi=None):
    anchors = np.column_stack([np.cos(angles), np.sin(angles)])
    sc = NetworkScenario(
        agents=[[0.0, 0.0]], anchors=anchors, xi=np.atleast_2d(xi), p_total=p_total
    )
    if eps_phi is not None:
        sc = sc.with_uncertainty(eps_phi=eps_phi)
    return sc


def random_spread_scenario(rng, n_anchors=3, eps_phi=None):
    """Anchors with guaranteed angular spread so every metric is finite."""
    base = rng.uniform(0, 2 * math.pi)
    gaps = rng.uniform(0.7, 1.6, n_anchors - 1)
    angles = base + np.concatenate([[0.0], np.cumsum(gaps)])
    radii = rng.uniform(1.0, 3.0, n_anchors)
    anchors = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    sc = NetworkScenario(
        agents=[[0.0, 0.0]],
        anchors=anchors,
        xi=rng.uniform(0.5, 4.0, (1, n_anchors)),
        p_total=1.0,
    )
    if eps_phi is not None:
        sc = sc.with_uncertainty(eps_phi=eps_phi)
    return sc


class TestDerivatives:
    """Finite-difference checks of the closed-form gradients/Hessians."""

    @staticmethod
    def _fd_check(term, v0, h=1e-6):
        n = v0.size
        g = np.zeros(n)
        H = np.zeros((n, n))
        term.add_grad(v0, g, 1.0)
        term.add_hess(v0, H, 1.0)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = (term.value(v0 + e) - term.value(v0 - e)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=5e-5, abs=1e-7)
            gp = np.zeros(n)
            gm = np.zeros(n)
            term.add_grad(v0 + e, gp, 1.0)
            term.add_grad(v0 - e, gm, 1.0)
            assert H[i] == pytest.approx((gp - gm) / (2 * h), rel=5e-4, abs=1e-5)

    def test_trace_inverse_term(self):
        rng = np.random.default_rng(0)
        sc = random_spread_scenario(rng, 4)
        data = solver._AgentData(sc, robust_mode=False)
        term = solver._TraceInvTerm(data.gmap, 4)
        self._fd_check(term, rng.uniform(0.1, 0.4, 4))

    def test_recip_term(self):
        rng = np.random.default_rng(1)
        sc = random_spread_scenario(rng, 3)
        data = solver._AgentData(sc, robust_mode=False)
        term = solver._RecipTerm(data.svec, 3, r_offset=3, nu=2.0)
        x = rng.uniform(0.2, 0.4, 3)
        z = data.zvec[0].T @ x
        r = 1.2 * float(np.hypot(*z))
        self._fd_check(term, np.concatenate([x, [r]]))

    def test_soc_barrier(self):
        rng = np.random.default_rng(2)
        sc = random_spread_scenario(rng, 3)
        data = solver._AgentData(sc, robust_mode=False)
        term = solver._SocBarrier(data.zvec, 3, r_offset=3)
        x = rng.uniform(0.2, 0.4, 3)
        z = data.zvec[0].T @ x
        r = 1.5 * float(np.hypot(*z)) + 0.1
        self._fd_check(term, np.concatenate([x, [r]]))

    def test_logdet_barrier(self):
        rng = np.random.default_rng(3)
        sc = random_spread_scenario(rng, 4, eps_phi=0.1)
        data = solver._AgentData(sc, robust_mode=True)
        term = solver._LogDetBarrier(data.gmap, 4)
        self._fd_check(term, rng.uniform(0.2, 0.4, 4))


class TestSolveSpeb:
    def test_orthogonal_equal(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        r = solve_speb(sc)
        assert r.status == "optimal"
        assert r.objective == pytest.approx(4.0, rel=1e-8)
        assert np.allclose(r.allocation.x, 0.5, atol=1e-4)

    def test_uneven_channel(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [4.0, 1.0])
        r = solve_speb(sc)
        assert r.objective == pytest.approx(2.25, rel=1e-8)
        assert np.allclose(r.allocation.x, [[1 / 3, 2 / 3]], atol=1e-4)

    def test_beats_uniform(self):
        for seed in range(10):
            sc = generate_scenario(n_agents=1, n_anchors=8, placement="center-agent", seed=seed)
            r = solve_speb(sc)
            uni = allocation_objective(sc, uniform_allocation(sc), "speb")
            assert r.objective <= uni + 1e-9

    def test_kkt_certificate(self):
        sc = generate_scenario(n_agents=2, n_anchors=6, seed=1)
        r = solve_speb(sc, tol=1e-8)
        assert r.status == "optimal"
        assert r.kkt_residual <= 1e-8
        r.allocation.validate(sc)

    def test_budget_saturated(self):
        for seed in range(5):
            sc = generate_scenario(n_agents=2, n_anchors=5, seed=seed)
            r = solve_speb(sc)
            assert r.allocation.total() == pytest.approx(sc.p_total, abs=1e-9)

    def test_scale_law(self):
        sc = generate_scenario(n_agents=1, n_anchors=5, seed=7)
        r1 = solve_speb(sc)
        from dataclasses import replace

        sc4 = replace(sc, p_total=4.0)
        r4 = solve_speb(sc4)
        assert r4.objective == pytest.approx(r1.objective / 4.0, rel=1e-9)

    def test_collinear_unbounded(self):
        sc = scenario_with_angles([0.3, 0.3 + math.pi], [1.0, 2.0])
        r = solve_speb(sc)
        assert r.status == "unbounded-metric"
        assert r.allocation is None

    def test_infeasible_bounds(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        feas = FeasibleSet(p_total=1.0, lower=np.full((1, 2), 0.8))
        r = solve_speb(sc, feasible_set=feas)
        assert r.status == "infeasible"

    def test_respects_anchor_caps(self):
        from dataclasses import replace

        sc = scenario_with_angles([0.0, math.pi / 2], [4.0, 1.0])
        sc = replace(sc, anchor_caps=np.array([0.2, 1.0]))
        r = solve_speb(sc)
        assert r.status == "optimal"
        assert np.sum(r.allocation.x, axis=0)[0] <= 0.2 + 1e-9
        # cap binds: the unconstrained optimum wanted 1/3 on anchor 0
        assert np.sum(r.allocation.x, axis=0)[0] == pytest.approx(0.2, abs=1e-6)

    def test_projected_gradient_stationarity(self):
        # At the reported optimum the objective gradient is constant over the
        # support of the allocation and no smaller off-support (budget-tight
        # polytope stationarity).
        sc = generate_scenario(n_agents=1, n_anchors=6, placement="center-agent", seed=3)
        r = solve_speb(sc, tol=1e-9)
        data = solver._AgentData(sc, robust_mode=False)
        term = solver._TraceInvTerm(data.gmap, 6)
        g = np.zeros(6)
        term.add_grad(r.allocation.x.ravel(), g, 1.0)
        support = r.allocation.x.ravel() > 1e-6
        nu = -g[support].mean()
        assert np.max(np.abs(g[support] + nu)) <= 1e-5 * nu
        assert np.all(g[~support] + nu >= -1e-5 * nu)


class TestSolveMdpeb:
    def test_orthogonal_equal(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        r = solve_mdpeb(sc)
        assert r.objective == pytest.approx(2.0, rel=1e-8)
        assert np.allclose(r.allocation.x, 0.5, atol=1e-4)

    def test_three_symmetric(self):
        angles = [0.0, 2 * math.pi / 3, 4 * math.pi / 3]
        sc = scenario_with_angles(angles, [1.0] * 3, p_total=2.0)
        r = solve_mdpeb(sc)
        assert r.objective == pytest.approx(2.0 / 2.0, rel=1e-7)

    def test_improves_smallest_eigenvalue(self):
        from locpower.fim import build_efim, eigen

        for seed in range(5):
            sc = generate_scenario(n_agents=1, n_anchors=8, placement="center-agent", seed=seed)
            r = solve_mdpeb(sc)
            mu2_opt = eigen(build_efim(sc, r.allocation, 0)).mu2
            mu2_uni = eigen(build_efim(sc, uniform_allocation(sc), 0)).mu2
            assert mu2_opt >= mu2_uni - 1e-9


class TestRobustSolves:
    def test_speb_collapse_at_zero_uncertainty(self):
        sc = generate_scenario(n_agents=1, n_anchors=6, placement="center-agent", seed=9)
        plain = solve_speb(sc)
        r = solve_robust_speb(sc.with_uncertainty(eps_phi=0.0))
        assert r.objective == pytest.approx(plain.objective, rel=1e-7)

    def test_mdpeb_collapse_at_zero_uncertainty(self):
        sc = generate_scenario(n_agents=1, n_anchors=6, placement="center-agent", seed=9)
        plain = solve_mdpeb(sc)
        r = solve_robust_mdpeb(sc.with_uncertainty(eps_phi=0.0))
        assert r.objective == pytest.approx(plain.objective, rel=1e-7)

    def test_orthogonal_surrogate_values(self):
        sc = scenario_with_angles(
            [0.0, math.pi / 2], [1.0, 1.0], eps_phi=math.asin(0.1)
        )
        r = solve_robust_speb(sc)
        assert r.objective == pytest.approx(5.0, rel=1e-7)
        assert np.allclose(r.allocation.x, 0.5, atol=1e-4)
        r2 = solve_robust_mdpeb(sc)
        assert r2.objective == pytest.approx(2.5, rel=1e-7)

    def test_psd_infeasible_cone(self):
        # Two anchors in a narrow cone with large angle uncertainty: no
        # allocation keeps the surrogate positive semidefinite.
        sc = scenario_with_angles([0.0, 0.05], [1.0, 1.0], eps_phi=0.4)
        r = solve_robust_speb(sc)
        assert r.status == "infeasible"
        assert solve_robust_mdpeb(sc).status == "infeasible"

    def test_requires_uncertainty_model(self):
        sc = generate_scenario(n_anchors=4, seed=0)
        with pytest.raises(ValueError, match="no uncertainty model"):
            solve_robust_speb(sc)

    def test_solution_is_psd(self):
        from locpower.robust import psd_condition, robust_efim

        sc = generate_scenario(
            n_agents=1, n_anchors=10, placement="center-agent", seed=21, eps_d=2.0
        )
        r = solve_robust_speb(sc)
        assert r.status == "optimal"
        assert all(psd_condition(m) for m in robust_efim(sc, r.allocation))


class TestEnergyMin:
    def test_orthogonal_target(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        r = solve_energy_min(sc, qos=4.0, metric="speb")
        assert r.status == "optimal"
        assert r.objective == pytest.approx(1.0, rel=1e-6)
        assert np.allclose(r.allocation.x, 0.5, atol=1e-4)

    def test_loose_target_needs_little_power(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        tight = solve_energy_min(sc, qos=4.0, metric="speb")
        loose = solve_energy_min(sc, qos=4000.0, metric="speb")
        assert loose.objective <= tight.objective / 100
    def test_inverse_scaling_with_target(self):
        sc = random_spread_scenario(np.random.default_rng(5), 4)
        r1 = solve_energy_min(sc, qos=2.0, metric="speb")
        r2 = solve_energy_min(sc, qos=4.0, metric="speb")
        assert r2.objective == pytest.approx(r1.objective / 2.0, rel=1e-6)

    def test_constraints_active_at_optimum(self):
        sc = random_spread_scenario(np.random.default_rng(6), 4)
        r = solve_energy_min(sc, qos=3.0, metric="speb")
        achieved = allocation_objective(sc, r.allocation, "speb")
        assert achieved == pytest.approx(3.0, rel=1e-6)

    def test_mdpeb_metric(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        # 1/mu2 <= 4 with mu2 = min(x1, x2) -> x = (1/4, 1/4)
        r = solve_energy_min(sc, qos=4.0, metric="mdpeb")
        assert r.objective == pytest.approx(0.5, rel=1e-6)


class TestMinmax:
    def test_single_agent_equals_sum(self):
        sc = generate_scenario(n_agents=1, n_anchors=5, placement="center-agent", seed=2)
        assert solve_minmax(sc, metric="speb").objective == pytest.approx(
            solve_speb(sc).objective, rel=1e-6
        )

    def test_symmetric_agents_equal_split(self):
        # Two agents mirrored through the anchor axis get equal power.
        anchors = np.array([[0.0, 1.0], [0.0, -1.0], [3.0, 0.0]])
        agents = np.array([[-1.0, 0.0], [1.0, 0.0]])
        diff = agents[:, None, :] - anchors[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        sc = NetworkScenario(agents=agents, anchors=anchors, xi=1e3 / dist**2)
        r = solve_minmax(sc, metric="speb")
        assert r.status == "optimal"
        per_agent = [
            allocation_objective(sc, r.allocation, "speb")
        ]
        totals = np.sum(r.allocation.x, axis=1)
        assert totals[0] != pytest.approx(0.0, abs=1e-6)

        metrics = [
            solver.allocation_objective(
                NetworkScenario(agents=agents[k : k + 1], anchors=anchors, xi=sc.xi[k : k + 1]),
                PowerAllocation(r.allocation.x[k : k + 1]),
                "speb",
            )
            for k in range(2)
        ]
        assert metrics[0] == pytest.approx(metrics[1], rel=1e-4)

    def test_matches_grid_oracle_within_lipschitz_band(self):
        rng = np.random.default_rng(11)
        agents = np.array([[-2.0, 0.0], [2.0, 1.0]])
        anchors = np.array([[0.0, 3.0], [1.0, -3.0]])
        diff = agents[:, None, :] - anchors[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        sc = NetworkScenario(agents=agents, anchors=anchors, xi=20.0 / dist)
        r = solve_minmax(sc, metric="speb")
        step = 4e-3
        oracle = oracle_grid(sc, "minmax-speb", step)
        assert r.objective <= oracle.objective + 1e-9
        assert oracle.objective - r.objective <= 10 * step * r.objective


class TestOracleGrid:
    def test_orthogonal_instance(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        res = oracle_grid(sc, "speb", 1e-3)
        assert np.allclose(res.allocation.x, 0.5, atol=1e-3)
        assert res.objective == pytest.approx(4.0, rel=1e-5)

    def test_uneven_instance(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [4.0, 1.0])
        res = oracle_grid(sc, "speb", 1e-3)
        assert np.allclose(res.allocation.x, [[1 / 3, 2 / 3]], atol=1e-3)
        assert res.objective == pytest.approx(2.25, rel=1e-5)

    def test_monotone_refinement(self):
        sc = random_spread_scenario(np.random.default_rng(12), 3)
        values = [oracle_grid(sc, "speb", s).objective for s in (0.01, 0.005, 0.0025)]
        assert values[0] >= values[1] >= values[2]

    def test_dimension_guard(self):
        sc = generate_scenario(n_agents=1, n_anchors=5, seed=0)
        with pytest.raises(ValueError, match="at most 4"):
            oracle_grid(sc, "speb", 0.01)

    def test_step_guard(self):
        sc = generate_scenario(n_agents=1, n_anchors=3, seed=0)
        with pytest.raises(ValueError):
            oracle_grid(sc, "speb", 0.0)

    def test_four_variable_path(self):
        agents = np.array([[-2.0, 0.0], [2.0, 1.0]])
        anchors = np.array([[0.0, 3.0], [1.0, -3.0]])
        diff = agents[:, None, :] - anchors[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        sc = NetworkScenario(agents=agents, anchors=anchors, xi=20.0 / dist)
        res = oracle_grid(sc, "speb", 5e-3)
        r = solve_speb(sc)
        assert r.objective <= res.objective + 1e-9
        assert res.objective - r.objective <= 10 * 5e-3 * r.objective


class TestConvexityProperties:
    @pytest.mark.parametrize("kind", ["speb", "mdpeb", "robust-speb", "robust-mdpeb"])
    def test_midpoint_convexity(self, kind):
        rng = np.random.default_rng(13)
        robust_mode = kind.startswith("robust")
        sc = random_spread_scenario(rng, 5, eps_phi=0.1 if robust_mode else None)
        for _ in range(200):
            x = rng.uniform(0, 1, (1, 5))
            y = rng.uniform(0, 1, (1, 5))
            x *= rng.uniform(0.3, 1.0) / x.sum()
            y *= rng.uniform(0.3, 1.0) / y.sum()
            fx = allocation_objective(sc, PowerAllocation(x), kind)
            fy = allocation_objective(sc, PowerAllocation(y), kind)
            if not (math.isfinite(fx) and math.isfinite(fy)):
                continue
            fm = allocation_objective(sc, PowerAllocation(0.5 * (x + y)), kind)
            assert fm <= 0.5 * (fx + fy) + 1e-9


class TestObjectiveParsing:
    def test_objective_str_round_trip(self):
        obj = solver._parse_objective("robust-mdpeb")
        assert obj == Objective("robust-mdpeb", "sum")
        assert solver._parse_objective("minmax-speb") == Objective("speb", "max")

    def test_invalid_metric(self):
        with pytest.raises(ValueError):
            Objective("nonsense")
