import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmrelax.sim import (AsymmetricConditionViolated, ControlInfeasible, OpenLoop, Trajectory, Uncontrolled,
                          check_asymmetric_condition, conservation_residual, delay, demand_satisfaction,
                          free_flow_trajectory, greedy_policy, random_policy, realize_demand_control, simulate,
                          step, step_uncontrolled, tts)

from conftest import bundled, diverge, onramp_merge, single_cell, symmetric_merge, triangular


class TestStep:
    def test_equilibrium(self):
        n = single_cell(rho0=40)
        nxt, phi = step(n, np.array([40.0]), np.array([np.nan]), np.array([4000.0]))
        assert phi[0] == pytest.approx(4000)
        assert nxt[0] == pytest.approx(40, abs=1e-12)

    def test_diverge_satisfaction(self):
        """Branch supply 1000 against a half share of 4000."""
        n = diverge()
        rho = np.array([40.0, 210.0, 0.0])
        assert n.supply(rho)[1] == pytest.approx(1000)
        kappa = demand_satisfaction(n, rho)
        assert kappa[0] == pytest.approx(0.5)
        assert kappa[1] == kappa[2] == 1.0  # sinks

    def test_diverge_keeps_turning_ratio(self):
        n = diverge()
        rho = np.array([40.0, 210.0, 0.0])
        nxt, phi = step(n, rho, np.full(3, np.nan), np.zeros(3))
        inflow = n.B @ phi
        assert phi[0] == pytest.approx(0.5 * 4000)
        assert inflow[1] / inflow[2] == pytest.approx(1.0, rel=1e-15)

    def test_free_diverge(self):
        kappa = demand_satisfaction(diverge(), np.array([40.0, 0.0, 0.0]))
        assert kappa[0] == 1.0

    def test_onramp_mainline_gets_residual(self):
        n = onramp_merge()
        rho = np.array([30.0, 20.0, 90.0])
        assert n.demand(rho)[0] == pytest.approx(3000)
        assert n.supply(rho)[2] == pytest.approx(4000)
        _, phi = step(n, rho, np.array([np.nan, 1500.0, np.nan]), np.zeros(3))
        assert phi[0] == pytest.approx(2500)
        assert phi[1] == 1500

    def test_onramp_reachability(self):
        n = onramp_merge()
        rho = np.array([30.0, 40.0, 210.0])  # ramp demand 4000 against supply 1000
        with pytest.raises(AsymmetricConditionViolated):
            step(n, rho, np.array([np.nan, 500.0, np.nan]), np.zeros(3))

    def test_input_above_demand(self):
        n = onramp_merge()
        with pytest.raises(ControlInfeasible) as exc:
            step(n, np.array([30.0, 20.0, 90.0]), np.array([np.nan, 2500.0, np.nan]), np.zeros(3))
        assert exc.value.cell == 1

    def test_merge_inflow_above_supply(self):
        n = symmetric_merge()
        rho = np.array([40.0, 40.0, 210.0])
        with pytest.raises(ControlInfeasible):
            step(n, rho, np.array([800.0, 800.0, np.nan]), np.zeros(3))
        step(n, rho, np.array([500.0, 500.0, np.nan]), np.zeros(3))

    def test_missing_input(self):
        with pytest.raises(ControlInfeasible):
            step(symmetric_merge(), np.zeros(3), np.full(3, np.nan), np.zeros(3))


class TestUncontrolled:
    def test_merge_at_capacity(self):
        sc = bundled("example2")
        _, phi = step_uncontrolled(sc.network, sc.network.initial_density, sc.demand[0])
        assert phi[0] == pytest.approx(2500)
        assert phi[1] == pytest.approx(2500)

    def test_proportional_rule(self):
        """Each inlet gets d * min(1, s / sum d)."""
        n = symmetric_merge()
        rho = np.array([40.0, 20.0, 210.0])
        _, phi = step_uncontrolled(n, rho, np.zeros(3))
        frac = 1000 / 6000
        assert phi[0] == pytest.approx(4000 * frac)
        assert phi[1] == pytest.approx(2000 * frac)

    def test_priority_rule(self):
        n = symmetric_merge()
        rho = np.array([40.0, 20.0, 210.0])
        _, phi = step_uncontrolled(n, rho, np.zeros(3), "daganzo", {0: 3.0, 1: 1.0})
        assert phi[0] + phi[1] == pytest.approx(1000)
        assert phi[0] == pytest.approx(750)

    def test_zero_state(self):
        n = bundled("artificial").network
        nxt, phi = step_uncontrolled(n, np.zeros(n.n), np.zeros(n.n))
        assert not phi.any() and not nxt.any()

    def test_blocked_cell(self):
        sc = bundled("example1")
        alpha = np.array([1.0, 0.0, 1.0])
        _, phi = step_uncontrolled(sc.network, sc.network.initial_density, sc.demand[0], alpha=alpha)
        assert phi[1] == 0


class TestSimulate:
    def test_zero_everything(self):
        n = bundled("artificial").network
        traj = simulate(n, np.zeros(n.n), np.zeros((20, n.n)), Uncontrolled())
        assert not traj.rho.any()
        assert traj.tts() == 0

    def test_tts_formula(self):
        n = single_cell(rho0=10)
        T = 12
        rho = np.full((T + 1, 1), 10.0)
        traj = Trajectory(n, rho, np.zeros((T, 1)), np.full((T, 1), np.nan), np.zeros((T, 1)))
        assert tts(traj) == pytest.approx(T * n.dt_h * 10)

    def test_free_flow_has_no_delay(self):
        sc = bundled("artificial")
        ff = free_flow_trajectory(sc.network, None, sc.demand)
        assert delay(ff) == pytest.approx(0, abs=1e-12)

    @pytest.mark.parametrize("name", ["artificial", "rocade"])
    def test_conservation(self, name):
        sc = bundled(name)
        traj = simulate(sc.network, None, sc.demand, Uncontrolled())
        assert conservation_residual(traj) <= 1e-9

    def test_conservation_controlled(self, rng):
        sc = bundled("artificial")
        traj = simulate(sc.network, None, sc.demand, random_policy(rng), check_asymmetric=False)
        assert conservation_residual(traj) <= 1e-9

    def test_open_loop_replays_policy(self):
        sc = bundled("artificial")
        first = simulate(sc.network, None, sc.demand, greedy_policy, check_asymmetric=False)
        again = simulate(sc.network, None, sc.demand, OpenLoop(first.inputs), check_asymmetric=False)
        assert np.array_equal(first.rho, again.rho)

    def test_delay_nonnegative(self):
        sc = bundled("artificial")
        assert delay(simulate(sc.network, None, sc.demand, Uncontrolled())) >= 0


class TestAsymmetricReport:
    def test_no_junctions(self):
        sc = bundled("example2")
        rep = check_asymmetric_condition(simulate(sc.network, None, sc.demand, Uncontrolled()))
        assert rep.ok and rep.junctions == () and rep.min_margin.size == 0

    def test_negative_margin(self):
        n = onramp_merge()
        T = 3
        rho = np.tile([30.0, 40.0, 210.0], (T + 1, 1))
        traj = Trajectory(n, rho, np.zeros((T, 3)), np.full((T, 3), np.nan), np.zeros((T, 3)))
        rep = check_asymmetric_condition(traj)
        assert not rep.ok
        assert rep.min_margin[0] == pytest.approx(1000 - 4000)


class TestRealization:
    def test_half(self):
        alpha, vsl = realize_demand_control(2000, 40, triangular())
        assert (alpha, vsl) == (0.5, 50)

    def test_full_and_zero(self):
        assert realize_demand_control(4000, 40, triangular())[0] == 1.0
        assert realize_demand_control(0, 40, triangular()) == (0.0, 0.0)
        assert realize_demand_control(0, 0, triangular())[0] == 1.0

    def test_too_much(self):
        with pytest.raises(ValueError):
            realize_demand_control(4500, 40, triangular())

    @settings(max_examples=100, deadline=None)
    @given(rho=st.floats(0.1, 250), frac=st.floats(0, 1))
    def test_both_reproduce_flow(self, rho, frac):
        fd = triangular()
        want = frac * fd.demand(rho)
        alpha, vsl = realize_demand_control(want, rho, fd)
        assert 0 <= alpha <= 1
        assert alpha * fd.demand(rho) == pytest.approx(want, abs=1e-9)
        assert min(vsl * rho, fd.demand(rho)) == pytest.approx(want, abs=1e-9)
