"""Receding-horizon merge control on a plant that may differ from the prediction model."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fnc import FncSpec, SolverFailure, recover, solve_relaxed
from .fundamental import CapacityDrop, Pwa
from .lp import SolveOptions
from .network import Network
from .sim import Trajectory, step


class MpcError(ValueError):
    pass


def controller_fd(fd: CapacityDrop) -> Pwa:
    """Concave stand-in for a capacity-drop diagram: cap halfway between free-flow and congested."""
    base = fd.base
    cap = 0.5 * (fd.demand_cap + fd.congested_cap)
    pts = [p for p in base.demand_pts if p[1] < cap]
    (x0, y0), (x1, y1) = base.demand_pts[len(pts) - 1], base.demand_pts[len(pts)]
    knee = x0 + (cap - y0) * (x1 - x0) / (y1 - y0)
    return Pwa(tuple(pts) + ((knee, cap),), base.supply_pts)


def controller_model(plant: Network) -> Network:
    return plant.with_fds([controller_fd(c.fd) if isinstance(c.fd, CapacityDrop) else c.fd
                           for c in plant.cells])


@dataclass
class MpcConfig:
    plant: Network
    controller: Network | None = None
    horizon_steps: int = 40          # 10 min at 15 s
    period_steps: int = 8            # 2 min at 15 s
    objective: str = "tts"
    epsilon: float = 0.0
    queue_caps: bool = False
    K: int = 32
    options: SolveOptions | None = None

    def __post_init__(self):
        if self.controller is None:
            self.controller = controller_model(self.plant)
        if not (1 <= self.period_steps <= self.horizon_steps):
            raise MpcError("need 1 <= period <= horizon")
        for c in self.controller.cells:
            if isinstance(c.fd, CapacityDrop):
                raise MpcError(f"controller model cell {c.label} is not concave")
        if self.controller.n != self.plant.n:
            raise MpcError("plant and controller must share the cell layout")

    @classmethod
    def from_seconds(cls, plant: Network, horizon_s: float = 600, period_s: float = 120, **kw) -> "MpcConfig":
        dt_s = plant.dt_h * 3600
        return cls(plant, horizon_steps=int(round(horizon_s / dt_s)), period_steps=int(round(period_s / dt_s)), **kw)


@dataclass
class MpcResult:
    trajectory: Trajectory
    log: list[dict] = field(default_factory=list)
    clipped_steps: int = 0

    def tts(self) -> float:
        return self.trajectory.tts()


def _window(demand: np.ndarray, t: int, H: int) -> np.ndarray:
    """Demand over [t, t+H); past the known profile the last row is held."""
    T = demand.shape[0]
    idx = np.minimum(np.arange(t, t + H), T - 1)
    return demand[idx]


def admissible_inputs(network: Network, rho: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clip inputs to the plant's demand and merge supply; reports whether anything changed."""
    u = np.array(u, dtype=float)
    d = network.demand(rho)
    s = network.supply(rho)
    ctrl = list(network.controlled)
    orig = u[ctrl].copy()
    u[ctrl] = np.clip(u[ctrl], 0.0, d[ctrl])
    for v in network.symmetric:
        (i,) = network.out_cells[v]
        ins = list(network.in_cells[v])
        want = sum(network.beta[(i, e)] * u[e] for e in ins)
        if want > s[i]:
            u[ins] *= s[i] / want
    for i, _, j in network.asymmetric_pairs:
        u[j] = min(u[j], s[i] / network.beta[(i, j)])
    return u, bool(np.any(np.abs(u[ctrl] - orig) > 1e-6))


def run_receding_horizon(config: MpcConfig, rho0: np.ndarray | None, demand: np.ndarray) -> MpcResult:
    """Re-solve every period from the measured plant state and apply the first period of inputs."""
    plant = config.plant
    demand = np.asarray(demand, dtype=float)
    T, n = demand.shape
    rho = np.empty((T + 1, n))
    rho[0] = plant.initial_density if rho0 is None else rho0
    phi = np.empty((T, n))
    inputs = np.full((T, n), np.nan)
    ctrl = list(plant.controlled)
    log = []
    clipped = 0
    t = 0
    while t < T:
        H = config.horizon_steps
        spec = FncSpec(config.controller, _window(demand, t, H), rho[t], config.objective, config.epsilon,
                       config.queue_caps, config.K)
        t0 = time.perf_counter()
        try:
            rel = solve_relaxed(spec, config.options)
        except SolverFailure as exc:
            log.append(dict(t=t, status=exc.solution.status.value if exc.solution else "failed",
                            message=str(exc)))
            raise
        plan = recover(spec, rel.inputs).inputs
        log.append(dict(t=t, status=rel.lp.status.value, objective=rel.objective, rows=rel.size.inequality_rows,
                        variables=rel.size.variables, iterations=sum(r["iterations"] for r in rel.log),
                        seconds=round(time.perf_counter() - t0, 4)))
        for k in range(min(config.period_steps, T - t)):
            u, changed = admissible_inputs(plant, rho[t], plan[k])
            clipped += changed
            rho[t + 1], phi[t] = step(plant, rho[t], u, demand[t], t=t, check_asymmetric=False)
            inputs[t, ctrl] = phi[t, ctrl]
            t += 1
    return MpcResult(Trajectory(plant, rho, phi, inputs, demand), log, clipped)
