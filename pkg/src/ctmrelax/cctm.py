"""Cumulative-flow form of the model and sampled checks of its structure.

A state is the vector Phi of cars that have left every cell so far.  Densities
follow from Phi, the initial densities and the cumulative arrivals W.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .fundamental import DomainError
from .network import Network
from .sim import (FLOW_TOL, ControlInfeasible, Trajectory, greedy_policy, residual_supply, simulate,
                  step_uncontrolled, OpenLoop)

DOMAIN_TOL = 1e-9


@dataclass
class CumulativeTrajectory:
    network: Network
    Phi: np.ndarray      # (T+1, n), Phi(0) = 0
    W: np.ndarray        # (T+1, n), W(0) = 0
    rho0: np.ndarray     # (n,)

    @property
    def T(self) -> int:
        return self.Phi.shape[0] - 1

    @property
    def Phi_hat(self) -> np.ndarray:
        """Mirror state -Phi on the controlled cells, (T+1, |controlled|)."""
        return -self.Phi[:, list(self.network.controlled)]

    @property
    def cum_inputs(self) -> np.ndarray:
        """varphi(t) = dt * sum_{tau <= t} phi(tau) for controlled cells, NaN elsewhere; (T, n)."""
        out = np.full((self.T, self.network.n), np.nan)
        ctrl = list(self.network.controlled)
        out[:, ctrl] = self.Phi[1:, ctrl]
        return out


def _cumsum0(x: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros((x.shape[0] + 1, x.shape[1]))
    np.cumsum(x * dt, axis=0, out=out[1:])
    return out


def to_cumulative(traj: Trajectory) -> CumulativeTrajectory:
    dt = traj.dt
    return CumulativeTrajectory(traj.network, _cumsum0(traj.phi, dt), _cumsum0(traj.w, dt), traj.rho[0].copy())


def densities(network: Network, Phi: np.ndarray, rho0: np.ndarray, W: np.ndarray) -> np.ndarray:
    """rho(Phi) = rho0 + (B Phi - Phi + W) / l; works on a single state or a stack of them."""
    Phi = np.asarray(Phi, dtype=float)
    return rho0 + (Phi @ network.B.T - Phi + W) / network.lengths


def from_cumulative(cum: CumulativeTrajectory, rho0: np.ndarray | None = None) -> Trajectory:
    net = cum.network
    r0 = cum.rho0 if rho0 is None else rho0
    rho = densities(net, cum.Phi, r0, cum.W)
    rho[0] = r0
    dt = net.dt_h
    phi = np.diff(cum.Phi, axis=0) / dt
    w = np.diff(cum.W, axis=0) / dt
    inputs = np.full_like(phi, np.nan)
    ctrl = list(net.controlled)
    inputs[:, ctrl] = phi[:, ctrl]
    return Trajectory(net, rho, phi, inputs, w)


def _checked_densities(network, Phi, rho0, W, tol=DOMAIN_TOL):
    rho = densities(network, Phi, rho0, W)
    rb = network.rho_bar
    scale = np.where(np.isfinite(rb), rb, 1.0)
    if np.any(rho < -tol * scale) or np.any(rho > rb + tol * scale):
        raise DomainError("cumulative state maps outside [0, rho_bar]")
    return np.clip(rho, 0.0, rb)


def cumulative_demand(network: Network, Phi: np.ndarray, rho0: np.ndarray, W: np.ndarray,
                      e: int | None = None):
    """D = Phi + dt * d(rho(Phi)); a vector, or one entry when ``e`` is given."""
    rho = _checked_densities(network, Phi, rho0, W)
    D = np.asarray(Phi, dtype=float) + network.dt_h * network.demand(rho)
    return D if e is None else float(D[e])


def cumulative_supply(network: Network, Phi: np.ndarray, cum_inputs: np.ndarray, rho0: np.ndarray,
                      W: np.ndarray, i: int, e: int) -> float:
    """S_{i,e} = Phi_e + dt/beta_ie (s_i - sum over ramps beta_ij (varphi_j - Phi_j)/dt)."""
    b = network.beta.get((i, e), 0.0)
    if b == 0.0:
        raise ValueError("cells are not connected")
    rho = _checked_densities(network, Phi, rho0, W)
    cell = network.cells[i]
    if cell.infinite_capacity:
        return math.inf
    dt = network.dt_h
    s = float(cell.fd.supply(rho[i]))
    for ii, _, j in network.asymmetric_pairs:
        if ii == i:
            s -= network.beta[(i, j)] * (cum_inputs[j] - Phi[j]) / dt
    return float(Phi[e] + dt / b * s)


def _supply_terms(network, Phi, cum_inputs, rho):
    """Vector of S_{i,e} over every (e in L, i downstream of e), in a fixed order."""
    dt = network.dt_h
    s = network.supply(rho)
    u = np.zeros(network.n)
    for _, _, j in network.asymmetric_pairs:
        u[j] = (cum_inputs[j] - Phi[j]) / dt
    r = residual_supply(network, s, u)
    out = []
    for e in network.n_free:
        for i in network.downstream[e]:
            out.append(Phi[e] + dt / network.beta[(i, e)] * r[i])
    return np.array(out)


def cctm_step(network: Network, Phi: np.ndarray, cum_inputs: np.ndarray, rho0: np.ndarray, W: np.ndarray,
              *, check: bool = True, tol: float = FLOW_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Phi(t+1) and the mirror state Phi_hat(t+1) from Phi(t), varphi(t) and W(t)."""
    Phi = np.asarray(Phi, dtype=float)
    varphi = np.asarray(cum_inputs, dtype=float)
    dt = network.dt_h
    rho = _checked_densities(network, Phi, rho0, W)
    D = Phi + dt * network.demand(rho)
    ctrl = list(network.controlled)
    if check:
        _check_cumulative_inputs(network, Phi, varphi, rho, D, tol * dt)
    nxt = D.copy()
    s = network.supply(rho)
    u = np.zeros(network.n)
    for _, _, j in network.asymmetric_pairs:
        u[j] = (varphi[j] - Phi[j]) / dt
    r = residual_supply(network, s, u)
    for e in network.n_free:
        for i in network.downstream[e]:
            cap = Phi[e] + dt / network.beta[(i, e)] * r[i]
            if cap < nxt[e]:
                nxt[e] = cap
    nxt[ctrl] = varphi[ctrl]
    return nxt, -varphi[ctrl]


def _check_cumulative_inputs(network, Phi, varphi, rho, D, tol):
    dt = network.dt_h
    for e in network.controlled:
        if varphi[e] < Phi[e] - tol:
            raise ControlInfeasible(f"cumulative input below state on {network.cells[e].label}", cell=e)
        if varphi[e] > D[e] + tol:
            raise ControlInfeasible(f"cumulative input above cumulative demand on {network.cells[e].label}", cell=e)
    for i in network.symmetric_outlets:
        c = network.cells[i]
        if c.infinite_capacity:
            continue
        lhs = sum(network.beta[(i, e)] * (varphi[e] - Phi[e]) for e in network.upstream[i])
        if lhs > dt * float(c.fd.supply(rho[i])) + tol:
            raise ControlInfeasible(f"cumulative merge inflow exceeds supply of {c.label}", cell=i)


def uncontrolled_cumulative_map(network: Network, w: np.ndarray, model: str = "proportional"):
    """Map on the augmented state (Phi, W) induced by an uncontrolled merge rule.

    External arrivals enter as the cumulative flow of a virtual origin, which
    is how a larger arrival stream shows up in cumulative coordinates.
    """
    n = network.n
    dt = network.dt_h
    rho0 = network.initial_density

    def fn(x, u=None):
        Phi, W = x[:n], x[n:]
        rho = _checked_densities(network, Phi, rho0, W)
        _, phi = step_uncontrolled(network, rho, w, model)
        return np.concatenate([Phi + dt * phi, W + dt * w])

    return fn


def tts_identity_gap(traj: Trajectory, network: Network | None = None) -> float:
    """|TTS - dt (C_W - sum_t sum_e c_hat_e Phi_e(t))|, sums over t = 1..T."""
    net = traj.network if network is None else network
    cum = to_cumulative(traj)
    direct = float(traj.dt * np.sum(traj.rho[1:] @ net.lengths))
    cw = float(np.sum(net.lengths * traj.rho[0]) * traj.T + np.sum(cum.W[1:]))
    via = traj.dt * (cw - float(np.sum(cum.Phi[1:] @ net.exit_fraction)))
    return abs(direct - via)


# ---------------------------------------------------------------------------
# sampled monotonicity and concavity

@dataclass
class PropertyReport:
    name: str
    trials: int
    evaluated: int = 0
    violations: int = 0
    worst: float = 0.0
    witness: Any = None

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.evaluated == self.trials

    def line(self) -> str:
        state = "PASS" if self.ok else "FAIL"
        return (f"{state} {self.name}: {self.evaluated}/{self.trials} trials evaluated, "
                f"{self.violations} violations, worst excess {self.worst:.3e}")


class RolloutSampler:
    """Draws reachable cumulative states by simulating random admissible inputs.

    ``draw`` returns (x, u) at a random time, where x is Phi(t) (optionally
    followed by W(t)) and u the cumulative inputs varphi(t).  The arrival
    stream is fixed per sampler so states drawn at the same time share W(t).
    """

    def __init__(self, network: Network, demand: np.ndarray, *, augmented: bool = False,
                 uncontrolled: bool = False, min_t: int = 1, rho0: np.ndarray | None = None):
        self.network = network
        self.demand = np.asarray(demand, dtype=float)
        self.augmented = augmented
        self.uncontrolled = uncontrolled
        self.min_t = min_t
        self.rho0 = network.initial_density if rho0 is None else np.asarray(rho0, dtype=float)
        self.W = _cumsum0(self.demand, network.dt_h)

    def _rollout(self, rng, t):
        net = self.network
        if self.uncontrolled:
            from .sim import Uncontrolled
            traj = simulate(net, self.rho0, self.demand[:t], Uncontrolled())
        else:
            fracs = rng.uniform(0.0, 1.0, (t, net.n)) ** rng.uniform(0.2, 2.0)

            def policy(k, rho, network):
                return np.where(network.controlled_mask, greedy_policy(k, rho, network) * fracs[k], np.nan)

            traj = simulate(net, self.rho0, self.demand[:t], policy, check_asymmetric=False)
        return to_cumulative(traj).Phi[-1], traj.rho[-1]

    def draw_time(self, rng) -> int:
        return int(rng.integers(self.min_t, self.demand.shape[0]))

    def draw(self, rng, t: int | None = None):
        net = self.network
        t = self.draw_time(rng) if t is None else t
        Phi, rho = self._rollout(rng, t)
        u = np.full(net.n, np.nan)
        g = greedy_policy(t, rho, net)
        frac = rng.uniform(0.0, 1.0, net.n)
        ctrl = list(net.controlled)
        u[ctrl] = Phi[ctrl] + net.dt_h * g[ctrl] * frac[ctrl]
        x = np.concatenate([Phi, self.W[t]]) if self.augmented else Phi
        return x, (u, t)

    def context(self, u):
        return u[1]

    def W_at(self, t):
        return self.W[t]

    def delta(self, rng, x) -> np.ndarray:
        n = self.network.n
        scale = rng.uniform(0.0, 2.0, x.size) * (rng.uniform(size=x.size) < 0.6)
        if self.augmented:
            # only perturb the arrival part in half of the draws
            if rng.uniform() < 0.5:
                scale[:n] = 0.0
        return scale

    def admissible(self, x, u) -> bool:
        net = self.network
        n = net.n
        t = u[1]
        Phi = x[:n]
        W = x[n:] if self.augmented else self.W[t]
        rho = densities(net, Phi, self.rho0, W)
        rb = net.rho_bar
        ok = np.all(rho >= 0) and np.all(rho <= rb)
        if not ok:
            return False
        if self.augmented:
            return True
        # inputs must stay within cumulative demand (Phi_e <= varphi_e <= D_e)
        D = Phi + net.dt_h * net.demand(rho)
        ctrl = list(net.controlled)
        vf = u[0]
        return bool(np.all(vf[ctrl] >= Phi[ctrl]) and np.all(vf[ctrl] <= D[ctrl]))


def check_state_monotone(fn: Callable, sampler: RolloutSampler, trials: int, *, seed: int = 0,
                         tol: float = 1e-7, name: str = "monotone") -> PropertyReport:
    """x2 = x1 - delta with delta >= 0 must give fn(x1) >= fn(x2) - tol.

    Draws whose lowered state cannot be made admissible are replaced, up to 20 draws per trial.
    """
    rep = PropertyReport(name, trials)
    for k in range(20 * trials):
        if rep.evaluated == trials:
            break
        rng = np.random.default_rng([seed, k])
        x1, u = sampler.draw(rng)
        delta = sampler.delta(rng, x1)
        for _ in range(30):
            x2 = x1 - delta
            if sampler.admissible(x2, u):
                break
            delta = delta * 0.5
        else:
            continue
        f1 = np.asarray(fn(x1, u), dtype=float)
        f2 = np.asarray(fn(x2, u), dtype=float)
        rep.evaluated += 1
        finite = np.isfinite(f1) & np.isfinite(f2)
        excess = float(np.max((f2 - f1)[finite], initial=0.0))
        rep.worst = max(rep.worst, excess)
        if excess > tol:
            rep.violations += 1
            if excess >= rep.worst:
                rep.witness = {"x1": x1, "x2": x2, "u": u, "f1": f1, "f2": f2}
    return rep


def check_concavity(fn: Callable, sampler: RolloutSampler, trials: int, *, seed: int = 0,
                    tol: float = 1e-7, name: str = "concave") -> PropertyReport:
    """fn(lam x1 + (1-lam) x2) >= lam fn(x1) + (1-lam) fn(x2) - tol on pairs at a common time."""
    rep = PropertyReport(name, trials)
    for k in range(trials):
        rng = np.random.default_rng([seed, k])
        t = sampler.draw_time(rng)
        x1, u1 = sampler.draw(rng, t)
        x2, u2 = sampler.draw(rng, t)
        lam = float(rng.uniform(0.05, 0.95))
        xm = lam * x1 + (1 - lam) * x2
        um = (np.where(np.isnan(u1[0]), np.nan, lam * np.nan_to_num(u1[0]) + (1 - lam) * np.nan_to_num(u2[0])), t)
        f1 = np.asarray(fn(x1, u1), dtype=float)
        f2 = np.asarray(fn(x2, u2), dtype=float)
        fm = np.asarray(fn(xm, um), dtype=float)
        rep.evaluated += 1
        chord = lam * f1 + (1 - lam) * f2
        finite = np.isfinite(chord) & np.isfinite(fm)
        excess = float(np.max((chord - fm)[finite], initial=0.0))
        rep.worst = max(rep.worst, excess)
        if excess > tol:
            rep.violations += 1
            if excess >= rep.worst:
                rep.witness = {"x1": x1, "x2": x2, "lam": lam, "f_mid": fm, "chord": chord}
    return rep


def demand_map(network: Network, sampler: RolloutSampler) -> Callable:
    def fn(x, u):
        t = u[1]
        return cumulative_demand(network, x[:network.n], sampler.rho0, sampler.W_at(t))
    return fn


def supply_map(network: Network, sampler: RolloutSampler) -> Callable:
    def fn(x, u):
        t = u[1]
        Phi = x[:network.n]
        rho = _checked_densities(network, Phi, sampler.rho0, sampler.W_at(t))
        return _supply_terms(network, Phi, u[0], rho)
    return fn


def step_map(network: Network, sampler: RolloutSampler) -> Callable:
    def fn(x, u):
        t = u[1]
        nxt, hat = cctm_step(network, x[:network.n], u[0], sampler.rho0, sampler.W_at(t), check=False)
        return np.concatenate([nxt, hat])
    return fn


# ---------------------------------------------------------------------------
# relaxed constraints in both coordinate systems

def relaxed_residuals_ctm(network: Network, rho: np.ndarray, phi: np.ndarray) -> dict[str, np.ndarray]:
    """Slacks of the relaxed constraints at one step; nonnegative means satisfied.

    demand: d_e - phi_e for every cell; supply: s_i - sum_e beta_ie phi_e for
    finite cells with upstream cells; nonneg: phi_e for controlled cells.
    """
    d = network.demand(rho)
    s = network.supply(rho)
    inflow = network.B @ phi
    sup_cells = [i for i in range(network.n)
                 if network.upstream[i] and not network.cells[i].infinite_capacity]
    return {
        "demand": d - phi,
        "supply": np.array([s[i] - inflow[i] for i in sup_cells]),
        "nonneg": phi[list(network.controlled)].copy(),
    }


def relaxed_residuals_cctm(network: Network, Phi: np.ndarray, Phi_next: np.ndarray, cum_inputs: np.ndarray,
                           rho0: np.ndarray, W: np.ndarray) -> dict[str, np.ndarray]:
    """Slacks of the relaxed cumulative constraints, arranged like ``relaxed_residuals_ctm``.

    Every entry is the cumulative constraint whose slack equals dt (or
    dt/beta for mainline supply) times the matching entry of the other form.
    """
    dt = network.dt_h
    rho = densities(network, Phi, rho0, W)
    D = Phi + dt * network.demand(rho)
    s = network.supply(rho)
    ctrl = set(network.controlled)
    varphi = np.where(np.isnan(cum_inputs), Phi_next, cum_inputs)
    dem = np.array([(D[e] - varphi[e]) if e in ctrl else (D[e] - Phi_next[e]) for e in range(network.n)])
    u = np.zeros(network.n)
    for _, _, j in network.asymmetric_pairs:
        u[j] = (varphi[j] - Phi[j]) / dt
    r = residual_supply(network, s, u)
    sup = []
    for i in range(network.n):
        if not network.upstream[i] or network.cells[i].infinite_capacity:
            continue
        ups = network.upstream[i]
        free = [e for e in ups if e in network.n_free]
        if free:
            (e,) = free
            sup.append(Phi[e] + dt / network.beta[(i, e)] * r[i] - Phi_next[e])
        else:
            lhs = sum(network.beta[(i, e)] * (varphi[e] - Phi[e]) for e in ups)
            sup.append(dt * s[i] - lhs)
    nonneg = np.array([varphi[e] + (-Phi[e]) for e in network.controlled])
    return {"demand": dem, "supply": np.array(sup), "nonneg": nonneg}


def residual_scale(network: Network) -> dict[str, np.ndarray]:
    """Factors mapping the step-form slacks onto the cumulative-form slacks."""
    dt = network.dt_h
    sup = []
    for i in range(network.n):
        if not network.upstream[i] or network.cells[i].infinite_capacity:
            continue
        free = [e for e in network.upstream[i] if e in network.n_free]
        sup.append(dt / network.beta[(i, free[0])] if free else dt)
    return {"demand": np.full(network.n, dt), "supply": np.array(sup),
            "nonneg": np.full(len(network.controlled), dt)}


def random_relaxed_trajectory(network: Network, demand: np.ndarray, rng: np.random.Generator,
                              rho0: np.ndarray | None = None) -> Trajectory:
    """Flows drawn anywhere between zero and min(demand, residual supply) in every cell.

    The result satisfies the relaxed constraints but in general not the
    model's min() rule for uncontrolled cells.
    """
    demand = np.asarray(demand, dtype=float)
    T, n = demand.shape
    rho = np.empty((T + 1, n))
    rho[0] = network.initial_density if rho0 is None else rho0
    phi = np.zeros((T, n))
    for t in range(T):
        g = greedy_policy(t, rho[t], network)
        u = np.where(network.controlled_mask, g * rng.uniform(0, 1, n), 0.0)
        d = network.demand(rho[t])
        s = network.supply(rho[t])
        r = residual_supply(network, s, u)
        f = u.copy()
        for e in range(n):
            if network.controlled_mask[e]:
                continue
            cap = d[e]
            if e in network.n_free:
                for i in network.downstream[e]:
                    cap = min(cap, max(r[i], 0.0) / network.beta[(i, e)])
            f[e] = cap * rng.uniform(0.0, 1.0) ** 0.5
        phi[t] = f
        rho[t + 1] = rho[t] + network.dt_h / network.lengths * (network.B @ f - f + demand[t])
    inputs = np.full((T, n), np.nan)
    inputs[:, list(network.controlled)] = phi[:, list(network.controlled)]
    return Trajectory(network, rho, phi, inputs, demand)


def residual_roundtrip_gap(traj: Trajectory) -> tuple[float, bool]:
    """Largest mismatch between scaled step-form slacks and cumulative-form slacks.

    Returns (max abs difference in cars, all signs agree).
    """
    net = traj.network
    cum = to_cumulative(traj)
    scale = residual_scale(net)
    worst = 0.0
    signs = True
    varphi = cum.cum_inputs
    for t in range(traj.T):
        a = relaxed_residuals_ctm(net, traj.rho[t], traj.phi[t])
        b = relaxed_residuals_cctm(net, cum.Phi[t], cum.Phi[t + 1], varphi[t], cum.rho0, cum.W[t])
        for key in a:
            lhs = a[key] * scale[key]
            worst = max(worst, float(np.max(np.abs(lhs - b[key]), initial=0.0)))
            signs &= bool(np.all((lhs >= -1e-9) == (b[key] >= -1e-9)))
    return worst, signs
