import math

import numpy as np
import pytest
from scipy.optimize import linprog

from ctmrelax.lp import LpBuilder, LpError, LpProblem, SolveOptions, Status, dual_bound, solve, write_lp
from ctmrelax.properties import enumerate_vertices, random_lp


def lp(c, A=None, b=None, E=None, g=None, lo=0.0, hi=math.inf):
    n = len(c)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(A)
    E = np.zeros((0, n)) if E is None else np.atleast_2d(E)
    return LpProblem(c, A, [] if b is None else b, E, [] if g is None else g, lo, hi)


class TestSmall:
    def test_single_bound(self):
        sol = solve(lp([-1.0], [[1.0]], [3.0]))
        assert sol.status is Status.OPTIMAL
        assert sol.objective == pytest.approx(-3)
        assert sol.x[0] == pytest.approx(3)

    def test_facet(self):
        sol = solve(lp([-1.0, -1.0], [[1.0, 1.0]], [1.0], hi=1.0))
        assert sol.objective == pytest.approx(-1)
        assert sol.x.sum() == pytest.approx(1)

    def test_infeasible(self):
        sol = solve(lp([1.0], [[1.0], [-1.0]], [1.0, -2.0]))
        assert sol.status is Status.INFEASIBLE

    def test_unbounded(self):
        assert solve(lp([-1.0, 0.0], [[0.0, 1.0]], [1.0])).status is Status.UNBOUNDED

    def test_equality_and_free_variable(self):
        sol = solve(lp([1.0, 2.0], E=[[1.0, 1.0]], g=[2.0], lo=[-math.inf, 0.0], hi=[5.0, 5.0]))
        # x1 costs more, so all of x0 + x1 = 2 lands on x0
        assert sol.objective == pytest.approx(2)
        assert sol.x == pytest.approx([2.0, 0.0])

    def test_iteration_limit(self):
        rng = np.random.default_rng(3)
        c, A, b, E, g, lo, hi = random_lp(rng)
        sol = solve(LpProblem(-np.abs(c) - 1, A, b + 5, E, g, lo, hi), max_iter=0)
        assert sol.status in (Status.ITER_LIMIT, Status.OPTIMAL)

    def test_rejects_nan(self):
        with pytest.raises(LpError):
            lp([np.nan])

    def test_builder(self):
        B = LpBuilder()
        x = B.add_var("x", cost=-1.0)
        y = B.add_var("y", cost=-2.0, hi=4.0)
        B.add_row({x: 1.0, y: 1.0}, "<=", 5.0, "cap")
        B.add_row({x: 1.0, y: -1.0}, "==", -1.0, "link")
        sol = solve(B.build())
        assert sol.objective == pytest.approx(-(2 + 2 * 3))


class TestOracle:
    @pytest.mark.parametrize("seed", range(40))
    def test_vertex_enumeration(self, seed):
        c, A, b, E, g, lo, hi = random_lp(np.random.default_rng([7, seed]))
        ref = enumerate_vertices(c, A, b, E, g, lo, hi)
        sol = solve(LpProblem(c, A, b, E, g, lo, hi))
        if math.isinf(ref):
            assert sol.status is Status.INFEASIBLE
        else:
            assert sol.status is Status.OPTIMAL
            assert sol.objective == pytest.approx(ref, abs=1e-7 * max(1, abs(ref)))
            assert sol.residual <= 1e-7

    @pytest.mark.parametrize("seed", range(10))
    def test_against_highs(self, seed):
        """The enumeration oracle itself agrees with an independent solver."""
        c, A, b, E, g, lo, hi = random_lp(np.random.default_rng([7, seed]))
        ref = enumerate_vertices(c, A, b, E, g, lo, hi)
        res = linprog(c, A_ub=A, b_ub=b, A_eq=E if E.size else None, b_eq=g if E.size else None,
                      bounds=list(zip(lo, hi)), method="highs")
        if math.isinf(ref):
            assert res.status == 2
        else:
            assert res.fun == pytest.approx(ref, abs=1e-7)


class TestAudit:
    @pytest.mark.parametrize("seed", range(15))
    def test_weak_duality(self, seed):
        c, A, b, E, g, lo, hi = random_lp(np.random.default_rng([11, seed]))
        prob = LpProblem(c, A, b, E, g, lo, hi)
        sol = solve(prob)
        if sol.status is not Status.OPTIMAL:
            return
        bound = dual_bound(prob, sol.duals_ub, sol.duals_eq)
        scale = max(1.0, abs(sol.objective))
        assert sol.objective >= bound - 1e-6 * scale
        assert bound == pytest.approx(sol.objective, abs=1e-6 * scale)

    def test_deterministic(self):
        c, A, b, E, g, lo, hi = random_lp(np.random.default_rng(5))
        prob = LpProblem(c, A, b, E, g, lo, hi)
        a, z = solve(prob), solve(prob)
        assert a.status is z.status and a.objective == z.objective and np.array_equal(a.x, z.x)

    def test_highs_backend(self):
        sol = solve(lp([-1.0, -1.0], [[1.0, 2.0]], [4.0], hi=3.0), SolveOptions(backend="highs"))
        assert sol.objective == pytest.approx(-3.5)

    def test_lp_dump(self, tmp_path):
        write_lp(lp([-1.0, 2.0], [[1.0, 1.0]], [3.0], hi=2.0), tmp_path / "p.lp")
        text = (tmp_path / "p.lp").read_text()
        assert text.splitlines()[1] == "Minimize"
        assert "Subject To" in text and text.rstrip().endswith("End")
        assert "x1 <= 2" in text
