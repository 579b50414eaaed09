import math

import numpy as np
import pytest

from locpower import fim
from locpower.fim import (
    Efim,
    PowerAllocation,
    async_power_scale,
    build_efim,
    dpeb,
    eigen,
    equivalent_power,
    mdpeb,
    speb,
    uniform_allocation,
    unit_vector,
)
from locpower.netmodel import NetworkScenario, generate_scenario


def random_psd_efim(rng, mu_lo=1e-2, mu_hi=1e2):
    """Random PSD 2x2 with controlled conditioning, via spectral synthesis."""
    mu1 = math.exp(rng.uniform(math.log(mu_lo), math.log(mu_hi)))
    mu2 = math.exp(rng.uniform(math.log(mu_lo), math.log(mu1)))
    th = rng.uniform(0, math.pi)
    c, s = math.cos(th), math.sin(th)
    u = np.array([[c, -s], [s, c]])
    return Efim(u @ np.diag([mu1, mu2]) @ u.T)


class TestUnitVector:
    def test_cardinal(self):
        assert np.allclose(unit_vector(0.0), [1, 0])
        assert np.allclose(unit_vector(math.pi / 2), [0, 1], atol=1e-15)

    def test_diagonal(self):
        assert np.allclose(unit_vector(math.pi / 4), [math.sqrt(2) / 2] * 2)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        phis = rng.uniform(-10, 10, 100)
        assert np.allclose(np.linalg.norm(unit_vector(phis), axis=-1), 1.0)


def scenario_with_angles(angles, xi, p_total=1.0):
    """Single agent at the origin, anchors at unit distance on given angles."""
    anchors = np.column_stack([np.cos(angles), np.sin(angles)])
    return NetworkScenario(
        agents=[[0.0, 0.0]], anchors=anchors, xi=np.atleast_2d(xi), p_total=p_total
    )


class TestBuildEfim:
    def test_rank_one(self):
        sc = scenario_with_angles([0.0], [1.0])
        e = build_efim(sc, PowerAllocation([[1.0]]), 0)
        assert np.allclose(e.m, [[1, 0], [0, 0]], atol=1e-15)

    def test_orthogonal_diagonal(self):
        sc = scenario_with_angles([0.0, math.pi / 2], [1.0, 1.0])
        e = build_efim(sc, PowerAllocation([[0.3, 0.7]]), 0)
        assert np.allclose(e.m, np.diag([0.3, 0.7]), atol=1e-15)

    def test_three_symmetric_anchors(self):
        sc = scenario_with_angles([0.0, math.pi / 3, 2 * math.pi / 3], [1.0] * 3)
        e = build_efim(sc, PowerAllocation([[1 / 3] * 3]), 0)
        assert np.allclose(e.m, 0.5 * np.eye(2), atol=1e-15)

    def test_psd_on_random_allocations(self):
        rng = np.random.default_rng(1)
        for seed in range(30):
            sc = generate_scenario(n_agents=2, n_anchors=6, seed=seed)
            x = rng.uniform(0, 1, (2, 6))
            x *= sc.p_total / x.sum()
            for k in range(2):
                e = build_efim(sc, PowerAllocation(x), k)
                assert np.allclose(e.m, e.m.T)
                assert np.linalg.eigvalsh(e.m).min() >= -1e-12

    def test_linear_in_allocation(self):
        sc = generate_scenario(n_agents=1, n_anchors=5, seed=3)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 0.1, (1, 5))
        y = rng.uniform(0, 0.1, (1, 5))
        combined = build_efim(sc, PowerAllocation(x + y), 0).m
        split = build_efim(sc, PowerAllocation(x), 0).m + build_efim(sc, PowerAllocation(y), 0).m
        assert np.allclose(combined, split, rtol=1e-14, atol=1e-18)


class TestSpeb:
    def test_identity(self):
        assert speb(Efim(np.eye(2))) == 2.0

    def test_half_identity(self):
        assert speb(Efim(0.5 * np.eye(2))) == pytest.approx(4.0)

    def test_rank_deficient_infinite(self):
        assert speb(Efim([[1, 0], [0, 0]])) == math.inf

    def test_matches_eigen_sum(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            e = random_psd_efim(rng)
            eg = eigen(e)
            expect = 1 / eg.mu1 + 1 / eg.mu2
            assert speb(e) == pytest.approx(expect, rel=1e-10)


class TestDpeb:
    def test_axis_aligned(self):
        assert dpeb(Efim(np.diag([4.0, 2.0])), 0.0) == pytest.approx(0.25)

    def test_isotropic(self):
        assert dpeb(Efim(np.eye(2)), 1.234) == pytest.approx(1.0)

    def test_matches_inverse_quadratic_form(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            e = random_psd_efim(rng)
            phi = rng.uniform(0, 2 * math.pi)
            u = unit_vector(phi)
            expect = float(u @ np.linalg.inv(e.m) @ u)
            assert dpeb(e, phi) == pytest.approx(expect, rel=1e-9)

    def test_singular_null_direction(self):
        e = Efim([[1, 0], [0, 0]])
        assert dpeb(e, math.pi / 2) == math.inf
        assert dpeb(e, 0.0) == pytest.approx(1.0)

    def test_rotational_covariance(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            e = random_psd_efim(rng)
            alpha = rng.uniform(0, 2 * math.pi)
            phi = rng.uniform(0, 2 * math.pi)
            c, s = math.cos(alpha), math.sin(alpha)
            r = np.array([[c, -s], [s, c]])
            rotated = Efim(r @ e.m @ r.T)
            assert dpeb(rotated, phi + alpha) == pytest.approx(dpeb(e, phi), rel=1e-10)


class TestMdpeb:
    def test_diag(self):
        assert mdpeb(Efim(np.diag([3.0, 1.0]))) == pytest.approx(1.0)

    def test_three_anchor_case(self):
        assert mdpeb(Efim(0.5 * np.eye(2))) == pytest.approx(2.0)

    def test_singular(self):
        assert mdpeb(Efim([[1, 0], [0, 0]])) == math.inf

    def test_direction_sweep_oracle(self):
        rng = np.random.default_rng(7)
        phis = np.linspace(0, 2 * math.pi, 3600, endpoint=False)
        for _ in range(50):
            e = random_psd_efim(rng, mu_lo=1e-1, mu_hi=1e1)
            sweep = max(dpeb(e, p) for p in phis)
            assert mdpeb(e) == pytest.approx(sweep, rel=1e-6)

    def test_bracketed_by_speb(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            e = random_psd_efim(rng)
            s, m = speb(e), mdpeb(e)
            assert s / 2 <= m <= s


class TestEigen:
    def test_diagonal_ordered(self):
        eg = eigen(Efim(np.diag([2.0, 5.0])))
        assert (eg.mu1, eg.mu2) == (5.0, 2.0)
        assert eg.theta == pytest.approx(math.pi / 2)

    def test_repeated_eigenvalue_convention(self):
        eg = eigen(Efim(0.5 * np.eye(2)))
        assert eg.mu1 == eg.mu2 == 0.5
        assert eg.theta == 0.0

    def test_rank_one_orientation(self):
        for phi in [0.3, 1.1, 2.0, 4.5, 5.9]:
            sc = scenario_with_angles([phi], [1.0])
            eg = eigen(build_efim(sc, PowerAllocation([[1.0]]), 0))
            assert eg.mu1 == pytest.approx(1.0, abs=1e-12)
            assert eg.mu2 == pytest.approx(0.0, abs=1e-12)
            assert eg.theta == pytest.approx(phi % math.pi, abs=1e-9)

    def test_matches_generic_eigensolver(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            e = random_psd_efim(rng)
            eg = eigen(e)
            ref = np.linalg.eigvalsh(e.m)
            assert eg.mu2 == pytest.approx(ref[0], rel=1e-12, abs=1e-12)
            assert eg.mu1 == pytest.approx(ref[1], rel=1e-12, abs=1e-12)

    def test_reconstruction(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            e = random_psd_efim(rng, mu_lo=1e-1, mu_hi=1e1)
            assert np.allclose(eigen(e).reconstruct(), e.m, atol=1e-12)


class TestUniformAllocation:
    def test_single_agent(self):
        sc = generate_scenario(n_agents=1, n_anchors=4, seed=0)
        assert np.allclose(uniform_allocation(sc).x, 0.25)

    def test_two_agents(self):
        sc = generate_scenario(n_agents=2, n_anchors=5, seed=0)
        assert np.allclose(uniform_allocation(sc).x, 0.1)

    def test_sums_to_budget(self):
        sc = generate_scenario(n_agents=3, n_anchors=7, seed=0)
        total = uniform_allocation(sc).total()
        assert abs(total - sc.p_total) <= 4 * np.finfo(float).eps * sc.p_total


class TestAsyncEquivalent:
    def test_equivalent_power_values(self):
        assert equivalent_power(1.0, 1.0) == pytest.approx(2.0)
        assert equivalent_power(0.0, 1.0) == 0.0

    def test_scale_factor_ratios(self):
        for p, pp in [(1.0, 1.0), (1.0, 3.0), (2.0, 0.5)]:
            assert async_power_scale(p, pp) == pytest.approx(
                4 * pp / (pp + p), rel=1e-12, abs=0
            )

    def test_equal_budgets_double(self):
        assert async_power_scale(1.0, 1.0) == 2.0

    def test_proportional_split_is_optimal(self):
        # Two links, anchor budget P and agent budget P': grid search over the
        # joint split confirms the proportional rule maximizes total
        # equivalent power, and that the maximum equals g(P, P').
        p_tot, pp_tot = 1.0, 2.0
        grid = np.linspace(1e-4, 1 - 1e-4, 201)
        best = -1.0
        for x1 in grid:
            x = np.array([x1, p_tot - x1])
            xp1 = grid * pp_tot
            totals = equivalent_power(x[0], xp1) + equivalent_power(
                x[1], pp_tot - xp1
            )
            i = int(np.argmax(totals))
            if totals[i] > best:
                best = float(totals[i])
        expect = equivalent_power(p_tot, pp_tot)
        assert best == pytest.approx(expect, rel=1e-3)
        # proportional split achieves the bound exactly
        x = np.array([0.3, 0.7])
        xp = (pp_tot / p_tot) * x
        assert np.sum(equivalent_power(x, xp)) == pytest.approx(expect, rel=1e-12)

    def test_async_efim_scaling(self):
        from dataclasses import replace

        sc = generate_scenario(n_agents=1, n_anchors=4, seed=12)
        sc = replace(sc, agent_p_total=2.0)
        alloc = uniform_allocation(sc)
        plain = build_efim(sc, alloc, 0)
        eqs = fim.async_equivalent(sc, alloc)
        scale = 4 * 2.0 / (2.0 + 1.0)
        assert np.allclose(eqs[0].m, scale * plain.m, rtol=1e-12)
