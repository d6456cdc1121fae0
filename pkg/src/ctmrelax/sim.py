"""Forward simulation of the cell transmission model with controlled merges."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .network import Network

# Flow tolerance (cars/h) when checking inputs against demand and supply.
# Inputs copied from an LP solution carry its feasibility tolerance.
FLOW_TOL = 1e-4


class SimulationError(RuntimeError):
    pass


class ControlInfeasible(SimulationError):
    def __init__(self, message: str, t: int | None = None, cell: int | None = None, excess: float = 0.0):
        super().__init__(message if t is None else f"step {t}: {message}")
        self.t = t
        self.cell = cell
        self.excess = excess


class AsymmetricConditionViolated(SimulationError):
    def __init__(self, message: str, t: int | None = None, junction: tuple[int, int, int] | None = None,
                 margin: float = 0.0):
        super().__init__(message if t is None else f"step {t}: {message}")
        self.t = t
        self.junction = junction
        self.margin = margin


# ---------------------------------------------------------------------------
# controllers

@dataclass(frozen=True)
class Uncontrolled:
    """Baseline: merges follow a priority rule, onramps are not metered."""

    model: str = "proportional"
    priorities: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.model not in ("proportional", "daganzo"):
            raise ValueError(f"unknown merge model {self.model!r}")
        if self.model == "daganzo" and not self.priorities:
            raise ValueError("daganzo merge model needs priorities")


@dataclass(frozen=True)
class OpenLoop:
    """Controlled flows per step, shape (T, n); entries of uncontrolled cells are ignored."""

    inputs: np.ndarray


Policy = Callable[[int, np.ndarray, Network], np.ndarray]
Controller = Union[Uncontrolled, OpenLoop, Policy]


# ---------------------------------------------------------------------------
# trajectory

@dataclass
class Trajectory:
    network: Network
    rho: np.ndarray        # (T+1, n)
    phi: np.ndarray        # (T, n)
    inputs: np.ndarray     # (T, n), NaN where no input applies
    w: np.ndarray          # (T, n)

    @property
    def T(self) -> int:
        return self.phi.shape[0]

    @property
    def dt(self) -> float:
        return self.network.dt_h

    def tts(self, weights: np.ndarray | None = None) -> float:
        return tts(self, weights)

    def cars(self) -> np.ndarray:
        """Cars stored in the network after each step."""
        return self.rho @ self.network.lengths


# ---------------------------------------------------------------------------
# single step

def _lcell_pairs(network: Network):
    cache = network.__dict__.get("_lpairs")
    if cache is None:
        es, is_, bs = [], [], []
        for e in network.n_free:
            for i in network.downstream[e]:
                es.append(e)
                is_.append(i)
                bs.append(network.beta[(i, e)])
        cache = (np.array(es, dtype=int), np.array(is_, dtype=int), np.array(bs, dtype=float),
                 np.array(network.n_free, dtype=int))
        network.__dict__["_lpairs"] = cache
    return cache


def residual_supply(network: Network, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """s_i minus the asymmetric ramp inflow into i."""
    r = s.copy()
    for i, _, j in network.asymmetric_pairs:
        r[i] = r[i] - network.beta[(i, j)] * u[j]
    return r


def _free_flows(network: Network, d: np.ndarray, r: np.ndarray, phi: np.ndarray) -> None:
    es, is_, bs, lcells = _lcell_pairs(network)
    if lcells.size == 0:
        return
    cap = np.full(network.n, math.inf)
    if es.size:
        ratio = np.maximum(r[is_], 0.0) / bs
        np.minimum.at(cap, es, ratio)
    phi[lcells] = np.minimum(d[lcells], cap[lcells])


def demand_satisfaction(network: Network, rho: np.ndarray, ramp_flows: np.ndarray | None = None) -> np.ndarray:
    """kappa_e for cells in L (NaN elsewhere); kappa = 1 for zero demand and for sinks."""
    rho = np.asarray(rho, dtype=float)
    u = np.zeros(network.n) if ramp_flows is None else np.nan_to_num(np.asarray(ramp_flows, dtype=float))
    d = network.demand(rho)
    r = residual_supply(network, network.supply(rho), u)
    phi = np.zeros(network.n)
    _free_flows(network, d, r, phi)
    kappa = np.full(network.n, np.nan)
    for e in network.n_free:
        kappa[e] = 1.0 if d[e] <= 0 else phi[e] / d[e]
    return kappa


def check_control(network: Network, d: np.ndarray, s: np.ndarray, u: np.ndarray,
                  t: int | None = None, tol: float = FLOW_TOL) -> None:
    for e in network.controlled:
        if not np.isfinite(u[e]):
            raise ControlInfeasible(f"no input given for controlled cell {network.cells[e].label}", t, e)
        slack = tol + 1e-9 * d[e]
        if u[e] < -slack:
            raise ControlInfeasible(f"negative input {u[e]} on {network.cells[e].label}", t, e, -u[e])
        if u[e] > d[e] + slack:
            raise ControlInfeasible(f"input {u[e]} exceeds demand {d[e]} on {network.cells[e].label}",
                                    t, e, u[e] - d[e])
    for i in network.symmetric_outlets:
        if math.isinf(s[i]):
            continue
        inflow = sum(network.beta[(i, e)] * u[e] for e in network.upstream[i])
        if inflow > s[i] + tol + 1e-9 * s[i]:
            raise ControlInfeasible(f"merge inflow {inflow} exceeds supply {s[i]} of {network.cells[i].label}",
                                    t, i, inflow - s[i])


def check_reachability(network: Network, d: np.ndarray, s: np.ndarray, t: int | None = None,
                       tol: float = FLOW_TOL) -> None:
    for i, e, j in network.asymmetric_pairs:
        margin = s[i] - network.beta[(i, j)] * d[j]
        if margin < -tol:
            raise AsymmetricConditionViolated(
                f"supply {s[i]:.6g} of {network.cells[i].label} below ramp demand share "
                f"{network.beta[(i, j)] * d[j]:.6g} of {network.cells[j].label}", t, (i, e, j), margin)


def step(network: Network, rho: np.ndarray, control: np.ndarray, w: np.ndarray, *, t: int | None = None,
         tol: float = FLOW_TOL, check_asymmetric: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """One step of the controlled model.  Returns (rho_next, flows)."""
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(control, dtype=float)
    d = network.demand(rho)
    s = network.supply(rho)
    check_control(network, d, s, u, t, tol)
    if check_asymmetric:
        check_reachability(network, d, s, t, tol)
    phi = np.zeros(network.n)
    ctrl = list(network.controlled)
    phi[ctrl] = u[ctrl]
    r = residual_supply(network, s, phi)
    for i, e, j in network.asymmetric_pairs:
        if r[i] < -tol:
            raise AsymmetricConditionViolated(
                f"ramp inflow leaves negative residual supply {r[i]:.6g} in {network.cells[i].label}", t, (i, e, j), r[i])
    _free_flows(network, d, r, phi)
    nu = list(network.n_subcritical)
    phi[nu] = d[nu]
    return advance(network, rho, phi, w), phi


def advance(network: Network, rho: np.ndarray, phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Conservation law: rho + dt/l (inflow - outflow + w)."""
    return rho + network.dt_h / network.lengths * (network.B @ phi - phi + w)


def _merge_split(demands: np.ndarray, betas: np.ndarray, supply: float, model: str,
                 priorities: np.ndarray | None) -> np.ndarray:
    want = betas * demands
    total = want.sum()
    if total <= supply or total <= 0:
        return demands.copy()
    if model == "proportional":
        # shares follow the raw demands; with turning rates below one the
        # outlet is then not filled completely
        return demands * min(1.0, supply / demands.sum())
    # priority water-filling; two inlets reduce to the usual median rule
    alloc = np.zeros_like(want)
    active = np.ones(want.size, dtype=bool)
    left = supply
    while active.any():
        p = priorities * active
        share = left * p / p.sum()
        done = active & (want <= share)
        if not done.any():
            alloc[active] = share[active]
            break
        alloc[done] = want[done]
        left -= want[done].sum()
        active &= ~done
    return alloc / betas


def step_uncontrolled(network: Network, rho: np.ndarray, w: np.ndarray, merge_model: str = "proportional",
                      priorities: Mapping[int, float] | None = None,
                      alpha: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One step where merges follow ``merge_model`` and onramps release their full demand.

    ``alpha`` scales each cell's demand (a demand-control realization); zero
    blocks a cell's outflow entirely.
    """
    rho = np.asarray(rho, dtype=float)
    d = network.demand(rho)
    if alpha is not None:
        d = d * np.asarray(alpha, dtype=float)
    s = network.supply(rho)
    phi = np.zeros(network.n)
    for v in sorted(network.symmetric):
        (i,) = network.out_cells[v]
        ins = np.array(network.in_cells[v])
        betas = np.array([network.beta[(i, e)] for e in ins])
        pr = None
        if merge_model == "daganzo":
            pr = np.array([float(priorities.get(int(e), 0.0)) for e in ins])
            if pr.sum() <= 0:
                pr = np.ones(ins.size)
        phi[ins] = _merge_split(d[ins], betas, s[i], merge_model, pr)
    for i, _, j in network.asymmetric_pairs:
        b = network.beta[(i, j)]
        phi[j] = min(d[j], s[i] / b)
    r = residual_supply(network, s, phi)
    _free_flows(network, d, r, phi)
    nu = list(network.n_subcritical)
    phi[nu] = d[nu]
    return advance(network, rho, phi, w), phi


# ---------------------------------------------------------------------------
# trajectories

def simulate(network: Network, rho0: np.ndarray | None, demand: np.ndarray, controller: Controller, *,
             tol: float = FLOW_TOL, check_asymmetric: bool = True) -> Trajectory:
    """Run T = len(demand) steps from rho0 (the network's initial densities if None)."""
    demand = np.asarray(demand, dtype=float)
    T, n = demand.shape
    if n != network.n:
        raise ValueError("demand profile has the wrong number of cells")
    rho = np.empty((T + 1, n))
    rho[0] = network.initial_density if rho0 is None else rho0
    phi = np.empty((T, n))
    inputs = np.full((T, n), np.nan)
    ctrl = list(network.controlled)
    for t in range(T):
        if isinstance(controller, Uncontrolled):
            rho[t + 1], phi[t] = step_uncontrolled(network, rho[t], demand[t], controller.model,
                                                   controller.priorities)
            continue
        if isinstance(controller, OpenLoop):
            u = np.asarray(controller.inputs[t], dtype=float)
        else:
            u = np.asarray(controller(t, rho[t].copy(), network), dtype=float)
        rho[t + 1], phi[t] = step(network, rho[t], u, demand[t], t=t, tol=tol,
                                  check_asymmetric=check_asymmetric)
        inputs[t, ctrl] = phi[t, ctrl]
    return Trajectory(network, rho, phi, inputs, demand)


def greedy_policy(t: int, rho: np.ndarray, network: Network) -> np.ndarray:
    """Largest admissible inputs: full demand, scaled down to fit symmetric-merge supply."""
    d = network.demand(rho)
    s = network.supply(rho)
    u = np.where(network.controlled_mask, d, np.nan)
    for v in network.symmetric:
        (i,) = network.out_cells[v]
        ins = list(network.in_cells[v])
        want = sum(network.beta[(i, e)] * u[e] for e in ins)
        if want > s[i]:
            u[ins] *= s[i] / want
    for i, _, j in network.asymmetric_pairs:
        u[j] = min(u[j], s[i] / network.beta[(i, j)])
    return u


def random_policy(rng: np.random.Generator) -> Policy:
    """Admissible inputs drawn uniformly between zero and the greedy values."""
    def policy(t, rho, network):
        u = greedy_policy(t, rho, network)
        frac = rng.uniform(0.0, 1.0, network.n)
        return np.where(network.controlled_mask, u * frac, np.nan)
    return policy


# ---------------------------------------------------------------------------
# metrics

def tts(traj: Trajectory, weights: np.ndarray | None = None) -> float:
    """dt * sum_{t=1..T} sum_e l_e rho_e(t), optionally reweighted per cell."""
    lw = traj.network.lengths if weights is None else traj.network.lengths * weights
    return float(traj.dt * np.sum(traj.rho[1:] @ lw))


def free_flow_trajectory(network: Network, rho0: np.ndarray | None, demand: np.ndarray) -> Trajectory:
    """Demand v*rho with no capacity limits anywhere."""
    demand = np.asarray(demand, dtype=float)
    T, n = demand.shape
    v = np.array([c.fd.lipschitz()[0] for c in network.cells])
    rho = np.empty((T + 1, n))
    rho[0] = network.initial_density if rho0 is None else rho0
    phi = np.empty((T, n))
    for t in range(T):
        phi[t] = v * rho[t]
        rho[t + 1] = advance(network, rho[t], phi[t], demand[t])
    return Trajectory(network, rho, phi, np.full((T, n), np.nan), demand)


def fft(network: Network, rho0: np.ndarray | None, demand: np.ndarray) -> float:
    return tts(free_flow_trajectory(network, rho0, demand))


def delay(traj: Trajectory) -> float:
    return tts(traj) - fft(traj.network, traj.rho[0], traj.w)


def conservation_residual(traj: Trajectory) -> float:
    """Relative mismatch of (arrivals - exits) against the change in stored cars."""
    net = traj.network
    dt = traj.dt
    arrivals = dt * traj.w.sum()
    exits = dt * float(np.sum(traj.phi @ net.exit_fraction))
    stored = float(traj.rho[-1] @ net.lengths - traj.rho[0] @ net.lengths)
    scale = max(1.0, arrivals, abs(stored))
    return abs(arrivals - exits - stored) / scale


def congested(traj: Trajectory, margin: float = 1e-6) -> np.ndarray:
    """(T+1, n) mask of densities above the critical density."""
    crit = np.array([c.fd.critical_density for c in traj.network.cells])
    return traj.rho > crit * (1 + margin) + margin


def first_congestion_step(traj: Trajectory, cell: int) -> int | None:
    hits = np.nonzero(congested(traj)[:, cell])[0]
    return int(hits[0]) if hits.size else None


@dataclass
class AsymmetricReport:
    junctions: tuple[tuple[int, int, int], ...]
    margins: np.ndarray                    # (T, k): s_i - beta_ij d_j
    shares: list[float] = field(default_factory=list)

    @property
    def min_margin(self) -> np.ndarray:
        if not self.junctions:
            return np.zeros(0)
        return self.margins.min(axis=1)

    @property
    def ok(self) -> bool:
        return not self.junctions or bool(np.all(self.margins >= -FLOW_TOL))

    def share_histogram(self, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(np.asarray(self.shares), bins=bins, range=(0.0, 1.0))


def check_asymmetric_condition(traj: Trajectory, network: Network | None = None) -> AsymmetricReport:
    net = traj.network if network is None else network
    pairs = net.asymmetric_pairs
    if not pairs:
        return AsymmetricReport((), np.zeros((traj.T, 0)))
    margins = np.empty((traj.T, len(pairs)))
    shares = []
    crit = np.array([c.fd.critical_density for c in net.cells])
    for t in range(traj.T):
        d = net.demand(traj.rho[t])
        s = net.supply(traj.rho[t])
        for k, (i, e, j) in enumerate(pairs):
            margins[t, k] = s[i] - net.beta[(i, j)] * d[j]
            if traj.rho[t, i] > crit[i]:
                on = net.beta[(i, j)] * traj.phi[t, j]
                ml = net.beta[(i, e)] * traj.phi[t, e]
                if on + ml > 0:
                    shares.append(on / (on + ml))
    return AsymmetricReport(pairs, margins, shares)


def realize_demand_control(desired_flow: float, rho: float, fd) -> tuple[float, float]:
    """Demand-scaling factor alpha and speed limit that both yield ``desired_flow``."""
    d = float(fd.demand(rho))
    if desired_flow < 0 or desired_flow > d * (1 + 1e-12) + 1e-12:
        raise ValueError(f"desired flow {desired_flow} outside [0, d(rho)={d}]")
    alpha = 1.0 if d <= 0 else min(1.0, desired_flow / d)
    vsl = 0.0 if desired_flow <= 0 or rho <= 0 else desired_flow / rho
    return alpha, vsl


def piecewise_constant(T: int, n: int, dt_h: float, series: Mapping[int, Sequence[tuple[float, float]]]) -> np.ndarray:
    """Demand matrix from per-cell (t_start_h, rate) lists."""
    w = np.zeros((T, n))
    times = np.arange(T) * dt_h
    for e, pts in series.items():
        pts = sorted(pts)
        for k, (t0, rate) in enumerate(pts):
            t1 = pts[k + 1][0] if k + 1 < len(pts) else math.inf
            w[(times >= t0 - 1e-12) & (times < t1 - 1e-12), e] = rate
    return w
