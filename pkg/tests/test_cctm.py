import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmrelax import cctm
from ctmrelax.fundamental import DomainError
from ctmrelax.properties import Target, proportional_merge_witness, roundtrip_checks, step_equivalence_check
from ctmrelax.sim import Trajectory, Uncontrolled, random_policy, simulate, step

from conftest import bundled, diverge, single_cell


class TestCoordinates:
    def test_zero(self):
        n = bundled("artificial").network
        traj = simulate(n, np.zeros(n.n), np.zeros((10, n.n)), Uncontrolled())
        cum = cctm.to_cumulative(traj)
        assert not cum.Phi.any() and not cum.W.any()

    def test_constant_flow(self):
        n = single_cell()
        T = 8
        traj = Trajectory(n, np.zeros((T + 1, 1)), np.full((T, 1), 1200.0), np.full((T, 1), np.nan),
                          np.full((T, 1), 1200.0))
        Phi = cctm.to_cumulative(traj).Phi[:, 0]
        assert np.allclose(Phi, 5 * np.arange(T + 1), rtol=1e-12)

    @pytest.mark.parametrize("name", ["artificial", "rocade"])
    def test_round_trip(self, name, rng):
        sc = bundled(name)
        traj = simulate(sc.network, None, sc.demand, random_policy(rng), check_asymmetric=False)
        back = cctm.from_cumulative(cctm.to_cumulative(traj))
        assert np.max(np.abs(back.rho - traj.rho)) < 1e-9
        assert np.allclose(back.phi, traj.phi, rtol=1e-12, atol=1e-9)

    def test_mirror_state(self, rng):
        sc = bundled("artificial")
        traj = simulate(sc.network, None, sc.demand, random_policy(rng), check_asymmetric=False)
        cum = cctm.to_cumulative(traj)
        ctrl = list(sc.network.controlled)
        assert np.array_equal(cum.Phi_hat + cum.Phi[:, ctrl], np.zeros_like(cum.Phi_hat))
        assert np.all(np.diff(cum.Phi, axis=0) >= 0)


class TestCumulativeMaps:
    def test_demand_at_rest(self):
        n = single_cell(rho0=40)
        D = cctm.cumulative_demand(n, np.zeros(1), n.initial_density, np.zeros(1), 0)
        assert D == pytest.approx(4000 / 240)

    def test_supply_at_rest(self):
        n = diverge(rho=(40.0, 210.0, 0.0))
        S = cctm.cumulative_supply(n, np.zeros(3), np.full(3, np.nan), n.initial_density, np.zeros(3), 1, 0)
        assert S == pytest.approx(n.dt_h * 1000 / 0.5)

    def test_domain(self):
        n = single_cell(rho0=0)
        with pytest.raises(DomainError):
            cctm.cumulative_demand(n, np.array([5.0]), n.initial_density, np.zeros(1))

    def test_controlled_cell_takes_input(self):
        sc = bundled("artificial")
        n = sc.network
        Phi = np.zeros(n.n)
        varphi = np.full(n.n, np.nan)
        ctrl = list(n.controlled)
        varphi[ctrl] = 0.0
        nxt, hat = cctm.cctm_step(n, Phi, varphi, n.initial_density, np.zeros(n.n))
        assert np.array_equal(nxt[ctrl], varphi[ctrl])
        assert np.array_equal(hat, -varphi[ctrl])

    def test_subcritical_inlet_moves_demand(self):
        sc = bundled("artificial")
        n = sc.network
        traj = simulate(n, None, sc.demand[:30], Uncontrolled())
        cum = cctm.to_cumulative(traj)
        t = 29
        varphi = np.where(n.controlled_mask, cum.Phi[t + 1], np.nan)
        nxt, _ = cctm.cctm_step(n, cum.Phi[t], varphi, cum.rho0, cum.W[t], check=False)
        D = cctm.cumulative_demand(n, cum.Phi[t], cum.rho0, cum.W[t])
        for e in n.n_subcritical:
            assert nxt[e] == pytest.approx(D[e], rel=1e-14)

    @pytest.mark.parametrize("name", ["artificial", "example1"])
    def test_step_equivalence(self, name):
        sc = bundled(name)
        assert step_equivalence_check(Target(name, sc.network, sc.demand), 20).ok

    @settings(max_examples=60, deadline=None)
    @given(d1=st.floats(0, 2), d2=st.floats(0, 2), rho2=st.floats(0, 250))
    def test_demand_is_monotone(self, d1, d2, rho2):
        """More departures upstream never lower anyone's cumulative demand."""
        n = diverge(rho=(40.0, rho2, 0.0))
        Phi = np.array([3.0, 1.0, 1.0])
        W = np.array([3.0, 0.0, 0.0])
        bump = np.array([0.0, d1, d2])
        try:
            hi = cctm.cumulative_demand(n, Phi + bump, n.initial_density, W)
            lo = cctm.cumulative_demand(n, Phi, n.initial_density, W)
        except DomainError:
            return
        assert np.all(hi >= lo - 1e-9)


class TestIdentities:
    def test_tts_identity_zero(self):
        n = bundled("artificial").network
        traj = simulate(n, np.zeros(n.n), np.zeros((10, n.n)), Uncontrolled())
        assert cctm.tts_identity_gap(traj) == 0

    @pytest.mark.parametrize("name", ["artificial", "rocade"])
    def test_tts_identity(self, name, rng):
        sc = bundled(name)
        traj = simulate(sc.network, None, sc.demand, random_policy(rng), check_asymmetric=False)
        assert cctm.tts_identity_gap(traj) <= 1e-9 * traj.tts()

    def test_residual_round_trip(self):
        sc = bundled("artificial")
        assert all(c.ok for c in roundtrip_checks(Target("artificial", sc.network, sc.demand), 3))

    def test_relaxed_trajectory_is_relaxed(self, rng):
        sc = bundled("artificial")
        traj = cctm.random_relaxed_trajectory(sc.network, sc.demand, rng)
        for t in range(traj.T):
            res = cctm.relaxed_residuals_ctm(sc.network, traj.rho[t], traj.phi[t])
            assert all(np.all(v >= -1e-9) for v in res.values())


class TestSampledProperties:
    def test_small_monotone_run(self):
        sc = bundled("example1")
        sampler = cctm.RolloutSampler(sc.network, sc.demand[:40])
        for fn in (cctm.demand_map(sc.network, sampler), cctm.step_map(sc.network, sampler)):
            rep = cctm.check_state_monotone(fn, sampler, 40)
            assert rep.ok, rep.line()

    def test_small_concave_run(self):
        sc = bundled("artificial")
        sampler = cctm.RolloutSampler(sc.network, sc.demand[:40])
        rep = cctm.check_concavity(cctm.step_map(sc.network, sampler), sampler, 30)
        assert rep.ok, rep.line()

    def test_proportional_merge_has_witness(self):
        sc = bundled("example2")
        check = proportional_merge_witness(Target("example2", sc.network, sc.demand), 200)
        assert check.ok, check.line()

    def test_controlled_step_agrees_with_density_step(self, rng):
        sc = bundled("example1")
        n = sc.network
        traj = simulate(n, None, sc.demand, random_policy(rng), check_asymmetric=False)
        cum = cctm.to_cumulative(traj)
        for t in range(0, traj.T, 17):
            varphi = np.where(n.controlled_mask, cum.Phi[t + 1], np.nan)
            nxt, _ = cctm.cctm_step(n, cum.Phi[t], varphi, cum.rho0, cum.W[t])
            _, phi = step(n, traj.rho[t], traj.inputs[t], traj.w[t], check_asymmetric=False)
            assert np.max(np.abs(cum.Phi[t] + n.dt_h * phi - nxt)) < 1e-9
