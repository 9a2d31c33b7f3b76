import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numba import njit

from racenmpc.solver import (
    LBFGS, BoxBounds, ConstraintMap, NlpProblem, NumericalError, SolverConfig, SolverError,
    Status, alm_pm_solve, lbfgs_direction, panoc_solve, panoc_solve_compiled, project_box,
)


def quadratic(c, A=None):
    c = np.asarray(c, dtype=float)
    A = np.eye(c.size) if A is None else A

    def fg(u):
        r = u - c
        return float(r @ A @ r), 2.0 * A @ r
    return fg


def rosenbrock(u):
    x, y = u
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


@njit
def _rosen_fg(u, a):
    x, y = u[0], u[1]
    g = np.empty(2)
    g[0] = -2 * (1 - x) - 400 * x * (y - x * x)
    g[1] = 200 * (y - x * x)
    return (1 - x) ** 2 + 100 * (y - x * x) ** 2, g


@njit
def _rosen_fv(u, a):
    x, y = u[0], u[1]
    return (1 - x) ** 2 + 100 * (y - x * x) ** 2


class TestBox:
    def test_inside_unchanged(self):
        box = BoxBounds([0, -1], [1, 1])
        np.testing.assert_array_equal(project_box(np.array([0.5, 0.2]), box), [0.5, 0.2])

    def test_clamp_table_bounds(self):
        box = BoxBounds([0, -math.pi / 6], [1, math.pi / 6])
        np.testing.assert_array_equal(project_box(np.array([2.0, -2.0]), box), [1, -math.pi / 6])

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_projection_optimal_and_idempotent(self, u, t):
        box = BoxBounds([-1, 0, -2], [1, 0.5, 2])
        u = np.array(u)
        pu = project_box(u, box)
        np.testing.assert_array_equal(project_box(pu, box), pu)
        v = box.lower + np.array(t) * (box.upper - box.lower)  # any feasible point
        assert np.linalg.norm(pu - u) <= np.linalg.norm(v - u) + 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(SolverError):
            project_box(np.zeros(3), BoxBounds.unbounded(2))

    def test_inverted_bounds(self):
        with pytest.raises(SolverError):
            BoxBounds([1.0], [0.0])


class TestLbfgs:
    def test_empty_history(self):
        np.testing.assert_array_equal(lbfgs_direction([], np.array([1.0, 0.0])), [-1.0, 0.0])

    def test_single_pair_identity(self):
        s = np.array([0.3, -0.2, 1.0])
        g = np.array([1.0, 2.0, -0.5])
        np.testing.assert_allclose(lbfgs_direction([(s, s)], g), -g, rtol=1e-14)

    def test_newton_direction_on_quadratic(self, rng):
        n = 5
        M = rng.normal(size=(n, n))
        A = M @ M.T + n * np.eye(n)
        # n A-conjugate steps (what exact line searches on a quadratic produce)
        # reproduce A^{-1} exactly
        steps = []
        for e in np.eye(n):
            s = e - sum((d @ A @ e) / (d @ A @ d) * d for d in steps)
            steps.append(s)
        hist = [(s, A @ s) for s in steps]
        g = rng.normal(size=n)
        np.testing.assert_allclose(lbfgs_direction(hist, g), -np.linalg.solve(A, g), atol=1e-8)

    def test_curvature_violating_pair_skipped(self):
        buf = LBFGS(2, 3)
        assert not buf.update(np.array([1.0, 0]), np.array([-1.0, 0]))
        assert buf.count == 0


class TestPanoc:
    def test_unconstrained_quadratic(self):
        c = np.array([0.3, -0.7, 0.1])
        prob = NlpProblem(3, quadratic(c), BoxBounds([-1] * 3, [1] * 3))
        sol = panoc_solve(prob, np.zeros(3), SolverConfig(eps_inner=1e-10))
        assert sol.status == Status.CONVERGED
        np.testing.assert_allclose(sol.u_star, c, atol=1e-8)

    def test_clipped_minimiser(self):
        prob = NlpProblem(2, quadratic([2.0, 2.0]), BoxBounds([0, 0], [1, 1]))
        sol = panoc_solve(prob, np.zeros(2))
        np.testing.assert_allclose(sol.u_star, [1.0, 1.0], atol=1e-12)

    def test_rosenbrock(self):
        prob = NlpProblem(2, rosenbrock, BoxBounds.unbounded(2))
        sol = panoc_solve(prob, np.array([-1.2, 1.0]), SolverConfig(eps_inner=1e-8))
        assert sol.inner_iters <= 500
        np.testing.assert_allclose(sol.u_star, [1.0, 1.0], atol=1e-4)

    def test_fbe_monotone_and_box(self, rng):
        n = 6
        M = rng.normal(size=(n, n))
        A = M @ M.T + 0.1 * np.eye(n)
        prob = NlpProblem(n, quadratic(rng.normal(size=n) * 3, A), BoxBounds([-1] * n, [1] * n))
        sol = panoc_solve(prob, rng.normal(size=n), SolverConfig(record_trace=True))
        assert sol.fbe_trace
        for phi, phi_new in sol.fbe_trace:
            assert phi_new <= phi + 1e-12
        assert np.all(sol.u_star >= -1) and np.all(sol.u_star <= 1)

    def test_max_iters_status(self):
        prob = NlpProblem(2, rosenbrock, BoxBounds.unbounded(2))
        sol = panoc_solve(prob, np.array([-1.2, 1.0]), SolverConfig(max_inner_iters=3))
        assert sol.status == Status.MAX_ITERS and sol.inner_iters == 3

    def test_non_finite_raises_with_snapshot(self):
        def bad(u):
            return (math.nan, np.zeros(1)) if u[0] > 0.5 else (float(u[0] ** 2), 2 * u)
        prob = NlpProblem(1, bad, BoxBounds.unbounded(1))
        with pytest.raises(NumericalError) as exc:
            panoc_solve(prob, np.array([1.0]))
        assert exc.value.iterate is not None

    def test_deterministic(self):
        prob = NlpProblem(2, rosenbrock, BoxBounds([-2, -2], [2, 2]))
        a = panoc_solve(prob, np.array([-1.2, 1.0]), SolverConfig(record_trace=True))
        b = panoc_solve(prob, np.array([-1.2, 1.0]), SolverConfig(record_trace=True))
        np.testing.assert_array_equal(a.u_star, b.u_star)
        assert a.fbe_trace == b.fbe_trace

    def test_compiled_matches_python(self):
        box = BoxBounds([-2, -2], [2, 2])
        cfg = SolverConfig(eps_inner=1e-8)
        py = panoc_solve(NlpProblem(2, rosenbrock, box, cost=lambda u: rosenbrock(u)[0]),
                         np.array([-1.2, 1.0]), cfg)
        jit = panoc_solve_compiled(_rosen_fg, _rosen_fv, (0.0,), box, np.array([-1.2, 1.0]), cfg)
        assert jit.status == py.status == Status.CONVERGED
        assert abs(jit.inner_iters - py.inner_iters) <= 2
        np.testing.assert_allclose(jit.u_star, py.u_star, atol=1e-7)


def _equality_problem():
    alm = ConstraintMap(lambda u: np.array([u[0] + u[1] - 1.0]),
                        lambda u, w: np.array([w[0], w[0]]))
    return NlpProblem(2, quadratic([0.0, 0.0]), BoxBounds.unbounded(2), alm_map=alm,
                      alm_set=(np.zeros(1), np.zeros(1)))


class TestAlmPm:
    def test_equality_kkt(self):
        sol = alm_pm_solve(_equality_problem(), np.zeros(2),
                           SolverConfig(eps_inner=1e-8, eps_outer=1e-8, max_outer_iters=30))
        assert sol.status == Status.CONVERGED
        np.testing.assert_allclose(sol.u_star, [0.5, 0.5], atol=1e-4)
        assert sol.multipliers[0] == pytest.approx(-1.0, abs=1e-3)

    def test_penalty_inequality(self):
        pm = ConstraintMap(lambda u: np.array([max(0.0, u[0] - 1.0)]),
                           lambda u, w: np.array([w[0] if u[0] > 1.0 else 0.0]))
        prob = NlpProblem(1, quadratic([2.0]), BoxBounds.unbounded(1), pm_map=pm)
        sol = alm_pm_solve(prob, np.zeros(1),
                           SolverConfig(eps_inner=1e-9, eps_outer=1e-4, max_outer_iters=20))
        assert sol.u_star[0] == pytest.approx(1.0, abs=1e-3)

    def test_no_maps_equals_panoc(self, rng):
        for _ in range(10):
            n = 4
            M = rng.normal(size=(n, n))
            prob = NlpProblem(n, quadratic(rng.normal(size=n), M @ M.T + np.eye(n)),
                              BoxBounds([-0.5] * n, [0.5] * n))
            u0 = rng.normal(size=n)
            a = alm_pm_solve(prob, u0)
            b = panoc_solve(prob, u0)
            np.testing.assert_array_equal(a.u_star, b.u_star)

    def test_multiplier_clipping(self):
        cfg = SolverConfig(lambda_min=-0.25, lambda_max=0.25, max_outer_iters=5)
        sol = alm_pm_solve(_equality_problem(), np.zeros(2), cfg)
        assert -0.25 <= sol.multipliers[0] <= 0.25

    def test_infeasible_reports_status(self):
        # u0 + u1 = 1 and u0 + u1 = -1 cannot both hold
        alm = ConstraintMap(lambda u: np.array([u[0] + u[1] - 1.0, u[0] + u[1] + 1.0]),
                            lambda u, w: np.array([w.sum(), w.sum()]))
        prob = NlpProblem(2, quadratic([0.0, 0.0]), BoxBounds.unbounded(2), alm_map=alm,
                          alm_set=(np.zeros(2), np.zeros(2)))
        sol = alm_pm_solve(prob, np.zeros(2), SolverConfig(max_penalty=1e3, max_outer_iters=50))
        assert sol.status == Status.INFEASIBLE
        assert sol.penalty <= 1e3

    def test_box_respected(self):
        sol = alm_pm_solve(_equality_problem().__class__(
            2, quadratic([3.0, 3.0]), BoxBounds([0, 0], [0.8, 0.8]),
            alm_map=_equality_problem().alm_map, alm_set=(np.zeros(1), np.zeros(1))),
            np.zeros(2))
        assert np.all(sol.u_star >= 0) and np.all(sol.u_star <= 0.8)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(eps_inner=0), dict(lbfgs_mem=0),
                                    dict(penalty_update_factor=1.0), dict(max_penalty=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(SolverError):
            SolverConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(SolverError, match="unknown"):
            SolverConfig.from_dict({"eps": 1})
