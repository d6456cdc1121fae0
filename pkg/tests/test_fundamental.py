import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmrelax.fundamental import (CapacityDrop, DomainError, FundamentalDiagramError, Pwa, Trapezoidal,
                                  apply_capacity_drop, cubic_hermite, eval_demand, eval_supply,
                                  hermite_cubic_demand, hermite_cubic_supply, lipschitz_constants,
                                  pwa_discretize, scale_lanes)

from conftest import bundled, triangular


def hermite_oracle(x0, y0, dy0, x1, y1, dy1):
    """Cubic through two points with given slopes, by a dense 4x4 solve."""
    M = np.array([[x0**3, x0**2, x0, 1], [3 * x0**2, 2 * x0, 1, 0],
                  [x1**3, x1**2, x1, 1], [3 * x1**2, 2 * x1, 1, 0]], dtype=float)
    return np.linalg.solve(M, [y0, dy0, y1, dy1])


def lane():
    return cubic_hermite(100, 30, 2000, 150, -35)


def bundled_fds():
    fds = [lane(), triangular()]
    for name in ("rocade", "artificial", "example1"):
        fds += [c.fd for c in bundled(name).network.cells if not c.integrator]
    return fds


class TestEvaluation:
    def test_trapezoid_demand(self):
        fd = Trapezoidal(90, 20, 4410, 4630.5, 300)
        assert eval_demand(fd, 30.0) == pytest.approx(2700)
        assert eval_demand(fd, 100.0) == pytest.approx(4410)

    def test_cubic_demand_midpoint(self):
        assert eval_demand(lane(), 15.0) == pytest.approx(-15**3 / 27 + 100 * 15, rel=1e-12)

    @pytest.mark.parametrize("fd", [lane(), triangular(), Trapezoidal(90, 20, 4410, 4630.5, 300)])
    def test_zero_density_zero_demand(self, fd):
        assert eval_demand(fd, 0.0) == 0.0

    def test_domain(self):
        with pytest.raises(DomainError):
            eval_demand(lane(), -1.0)
        with pytest.raises(DomainError):
            eval_supply(lane(), 151.0)

    def test_unbounded_supply_is_flagged(self):
        assert math.isinf(eval_supply(triangular(), 400.0, infinite_capacity=True))

    def test_scalar_and_array_paths_agree(self):
        fd = lane()
        r = np.linspace(0, 150, 301)
        assert np.array_equal(fd.demand(r), [fd.demand(float(x)) for x in r])
        assert np.array_equal(fd.supply(r), [fd.supply(float(x)) for x in r])


class TestHermite:
    def test_demand_matches_linear_solve(self):
        ref = hermite_oracle(0, 0, 100, 30, 2000, 0)
        assert np.allclose(hermite_cubic_demand(100, 30, 2000), ref, rtol=1e-12, atol=1e-12)
        assert np.allclose(ref, [-1 / 27, 0, 100, 0], atol=1e-12)

    def test_half_capacity_case_matches_oracle(self):
        # F = v0 rho_c / 2 with a flat end; the same system decides, including concavity
        ref = hermite_oracle(0, 0, 100, 30, 1500, 0)
        concave = all(6 * ref[0] * x + 2 * ref[1] <= 1e-9 for x in (0, 30))
        if concave:
            assert np.allclose(hermite_cubic_demand(100, 30, 1500), ref, atol=1e-9)
        else:
            with pytest.raises(FundamentalDiagramError):
                hermite_cubic_demand(100, 30, 1500)

    def test_affine_demand(self):
        c = hermite_cubic_demand(100, 30, 3000, end_slope=100)
        assert np.allclose(c, (0, 0, 100, 0), atol=1e-12)

    def test_supply_matches_linear_solve(self):
        c = hermite_cubic_supply(30, 2000, 150, -35)
        assert np.allclose(c, hermite_oracle(30, 2000, 0, 150, 0, -35), rtol=1e-9)
        assert np.polyval(c, 150) == pytest.approx(0, abs=1e-8)
        assert np.polyval(np.polyder(c), 150) == pytest.approx(-35, rel=1e-12)

    def test_affine_supply(self):
        c = hermite_cubic_supply(30, 2000, 130, -20, start_slope=-20)
        assert np.allclose(c[:2], 0, atol=1e-12)

    @pytest.mark.parametrize("span", [80, 85, 172, 180])
    def test_supply_outside_concavity_window(self, span):
        with pytest.raises(FundamentalDiagramError):
            hermite_cubic_supply(30, 2000, 30 + span, -35)

    @pytest.mark.parametrize("span", [86, 120, 171])
    def test_supply_inside_concavity_window(self, span):
        hermite_cubic_supply(30, 2000, 30 + span, -35)

    def test_window_edges_from_second_derivative(self):
        # the endpoint second derivatives change sign at these two spans
        lo, hi = 12000 / 140, 12000 / 70
        for L in np.linspace(60, 200, 57):
            c = hermite_oracle(0, 2000, 0, L, 0, -35)
            concave = all(6 * c[0] * x + 2 * c[1] <= 1e-12 for x in (0, L))
            assert concave == (lo - 1e-9 <= L <= hi + 1e-9)


class TestDiscretization:
    def test_two_segments(self):
        p = pwa_discretize(lane(), 2)
        assert p.demand(22.5) == pytest.approx(1687.5)
        assert lane().demand(22.5) == pytest.approx(1828.125)

    def test_trapezoid_unchanged(self):
        fd = Trapezoidal(90, 20, 4410, 4630.5, 300)
        p = pwa_discretize(fd)
        r = np.linspace(0, 300, 10_001)
        assert np.allclose(p.demand(r), fd.demand(r), atol=1e-9)
        assert np.allclose(p.supply(r), fd.supply(r), atol=1e-9)

    @pytest.mark.parametrize("K", [2, 4, 8, 32])
    def test_secant_underestimates(self, K):
        for fd in bundled_fds():
            p = pwa_discretize(fd, K)
            rb = fd.rho_bar if math.isfinite(fd.rho_bar) else 2 * fd.critical_density
            r = np.linspace(0, rb, 10_000)
            assert np.all(p.demand(r) <= fd.demand(r) + 1e-9)
            if math.isfinite(fd.rho_bar):
                assert np.all(p.supply(r) <= fd.supply(r) + 1e-9)
            gd, gs = lipschitz_constants(p)
            assert gd <= lipschitz_constants(fd)[0] + 1e-9
            assert gs <= lipschitz_constants(fd)[1] + 1e-9

    @pytest.mark.parametrize("K", [2, 8, 32, 128])
    def test_gap_shrinks_with_K(self, K):
        fd = lane()
        p = pwa_discretize(fd, K)
        r = np.linspace(0, 150, 10_000)
        assert np.max(fd.demand(r) - p.demand(r)) <= 100 * 30 / K
        assert np.max(fd.supply(r) - p.supply(r)) <= 35 * 120 / K

    def test_rejects_capacity_drop(self):
        with pytest.raises(FundamentalDiagramError):
            pwa_discretize(apply_capacity_drop(triangular(), 0.1))


class TestSlopesAndScaling:
    def test_trapezoid(self):
        assert lipschitz_constants(Trapezoidal(90, 20, 4410, 4630.5, 300)) == (90, 20)

    def test_cubic(self):
        gd, gs = lipschitz_constants(lane())
        assert gd == pytest.approx(100)
        assert gs == pytest.approx(35, rel=1e-9)

    def test_pwa(self):
        p = Pwa(((0, 0), (10, 1000), (30, 1500)), ((0, 1200), (100, 800), (140, 0)))
        assert lipschitz_constants(p) == (100, 20)

    def test_three_lanes(self):
        fd = scale_lanes(lane(), 3)
        assert fd.demand_cap == 6000
        assert fd.rho_bar == 450
        assert np.allclose(lipschitz_constants(fd), lipschitz_constants(lane()), rtol=1e-9)
        r = np.linspace(0, 150, 101)
        assert np.allclose(fd.demand(3 * r), 3 * lane().demand(r), rtol=1e-12, atol=1e-9)
        assert np.allclose(fd.supply(3 * r), 3 * lane().supply(r), rtol=1e-12, atol=1e-7)

    def test_capacity_drop(self):
        fd = apply_capacity_drop(Trapezoidal(90, 20, 4500, 4725, 300), 0.10)
        assert isinstance(fd, CapacityDrop)
        assert fd.demand_cap == pytest.approx(5000)
        assert fd.congested_cap == pytest.approx(4500)
        assert fd.demand(fd.rho_c + 1.0) == pytest.approx(4500)
        assert fd.demand(fd.rho_c) == pytest.approx(5000)

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1])
    def test_capacity_drop_fraction(self, f):
        with pytest.raises(FundamentalDiagramError):
            apply_capacity_drop(triangular(), f)


def _secants_decrease(f, r1, r2, r3):
    a = (f(r2) - f(r1)) / (r2 - r1)
    b = (f(r3) - f(r2)) / (r3 - r2)
    return b <= a + 1e-9 * max(1.0, abs(a), abs(b))


CONCAVE = [lane(), scale_lanes(lane(), 3), triangular(), pwa_discretize(lane(), 8),
           Trapezoidal(90, 20, 4410, 4630.5, 300)]


class TestConcavity:
    @settings(max_examples=200, deadline=None)
    @given(k=st.integers(0, len(CONCAVE) - 1),
           u=st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=3, unique=True))
    def test_secant_slopes(self, k, u):
        fd = CONCAVE[k]
        r1, r2, r3 = sorted(x * fd.rho_bar for x in u)
        if r2 - r1 < 1e-6 or r3 - r2 < 1e-6:
            return
        assert _secants_decrease(fd.demand, r1, r2, r3)
        assert _secants_decrease(fd.supply, r1, r2, r3)

    def test_capacity_drop_breaks_it(self):
        fd = apply_capacity_drop(triangular(), 0.1)
        r = fd.rho_c
        assert not _secants_decrease(fd.demand, r - 1, r + 1, r + 2)
