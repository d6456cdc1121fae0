import numpy as np
import pytest

from ctmrelax.fnc import FncSpec, optimize
from ctmrelax.fundamental import apply_capacity_drop
from ctmrelax.mpc import MpcConfig, MpcError, _window, admissible_inputs, controller_fd, run_receding_horizon
from ctmrelax.sim import conservation_residual

from conftest import onramp_merge, onramp_scenario, symmetric_merge, triangular


class TestConfig:
    def test_period_within_horizon(self):
        sc = onramp_scenario()
        with pytest.raises(MpcError):
            MpcConfig(sc.network, horizon_steps=4, period_steps=8)
        with pytest.raises(MpcError):
            MpcConfig(sc.network, period_steps=0)

    def test_controller_must_be_concave(self):
        sc = onramp_scenario()
        dropped = sc.network.with_fds([apply_capacity_drop(c.fd, 0.1) if c.id == 3 else c.fd
                                       for c in sc.network.cells])
        with pytest.raises(MpcError):
            MpcConfig(sc.network, controller=dropped)
        assert MpcConfig(dropped).controller is not dropped

    def test_from_seconds(self):
        cfg = MpcConfig.from_seconds(onramp_scenario().network)
        assert (cfg.horizon_steps, cfg.period_steps) == (40, 8)


class TestControllerModel:
    def test_cap_is_the_mean(self):
        fd = apply_capacity_drop(triangular(), 0.1)
        pwa = controller_fd(fd)
        assert pwa.demand_cap == pytest.approx(0.5 * (fd.demand_cap + fd.congested_cap))
        assert pwa.supply(250) == pytest.approx(0)

    def test_model_is_concave(self):
        pwa = controller_fd(apply_capacity_drop(triangular(), 0.1))
        x = np.linspace(0, 250, 501)
        d = np.array([pwa.demand(r) for r in x])
        assert np.all(np.diff(d, 2) <= 1e-9)


class TestAdmissible:
    def test_clips_to_demand(self):
        n = onramp_merge()
        rho = np.array([30.0, 20.0, 90.0])
        u, changed = admissible_inputs(n, rho, np.array([np.nan, 2500.0, np.nan]))
        assert changed and u[1] == pytest.approx(n.demand(rho)[1])

    def test_scales_symmetric_merge(self):
        n = symmetric_merge()
        rho = np.array([40.0, 40.0, 210.0])
        u, changed = admissible_inputs(n, rho, np.array([800.0, 800.0, np.nan]))
        assert changed
        assert u[0] + u[1] == pytest.approx(n.supply(rho)[2])
        assert u[0] == pytest.approx(u[1])

    def test_feasible_untouched(self):
        n = onramp_merge()
        u, changed = admissible_inputs(n, np.array([30.0, 20.0, 90.0]), np.array([np.nan, 500.0, np.nan]))
        assert not changed and u[1] == 500.0


class TestWindow:
    def test_holds_last_row(self):
        demand = np.arange(10.0)[:, None]
        w = _window(demand, 7, 5)
        assert w[:, 0].tolist() == [7, 8, 9, 9, 9]


class TestClosedLoop:
    def test_no_mismatch_matches_single_shot(self):
        """Plant equals model and the horizon covers the run, so re-planning cannot lose much."""
        sc = onramp_scenario()
        single = optimize(FncSpec(sc.network, sc.demand))
        res = run_receding_horizon(MpcConfig(sc.network), None, sc.demand)
        assert res.tts() <= single.tts_recovered * 1.01
        assert len(res.log) == 5

    def test_zero_demand(self):
        sc = onramp_scenario()
        n = sc.network
        res = run_receding_horizon(MpcConfig(n, horizon_steps=8, period_steps=4), np.zeros(n.n),
                                   np.zeros_like(sc.demand))
        assert res.tts() == 0

    def test_plant_stays_in_box(self):
        sc = onramp_scenario(main=4500, ramp=1800)
        n = sc.network
        plant = n.with_fds([apply_capacity_drop(c.fd, 0.1) if c.id == 3 else c.fd for c in n.cells])
        res = run_receding_horizon(MpcConfig(plant, horizon_steps=16, period_steps=4), None, sc.demand)
        traj = res.trajectory
        finite = [e for e in range(n.n) if not n.cells[e].infinite_capacity]
        assert np.all(traj.rho >= -1e-9)
        assert np.all(traj.rho[:, finite] <= n.rho_bar[finite] + 1e-9)
        assert conservation_residual(traj) <= 1e-9
