"""Optimal merge control through the relaxed linear program and forward simulation.

The relaxed problem replaces the flow rule min(demand, supply) by the two
inequalities flow <= demand and inflow <= supply.  Its optimal controlled
flows, replayed through the model, give a trajectory with the same cost.

Variables are kept in car units: q_e(t) = dt * phi_e(t) for t = 0..T-1 and
n_e(t) = l_e * rho_e(t) for t = 1..T.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fundamental import CapacityDrop, Pwa, pwa_discretize
from .lp import Basis, LpProblem, LpSolution, SolveOptions, Status, solve
from .network import Network
from .sim import (AsymmetricReport, OpenLoop, Trajectory, advance, check_asymmetric_condition, simulate)


class FncError(ValueError):
    pass


class SolverFailure(RuntimeError):
    def __init__(self, message: str, solution: LpSolution | None = None):
        super().__init__(message)
        self.solution = solution


# slack (cars) under which a line counts as tight when building the crash basis
_TIGHT = 1e-9


@dataclass(frozen=True)
class FncSpec:
    network: Network
    demand: np.ndarray                 # (T, n) exogenous inflow, cars/h
    rho0: np.ndarray | None = None
    objective: str = "tts"             # "tts" or "tts_eps"
    epsilon: float = 0.0
    queue_caps: bool = False
    K: int = 32

    def __post_init__(self):
        d = np.asarray(self.demand, dtype=float)
        object.__setattr__(self, "demand", d)
        if d.ndim != 2 or d.shape[1] != self.network.n:
            raise FncError("demand must have shape (T, n)")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise FncError("demand must be finite and nonnegative")
        if self.objective not in ("tts", "tts_eps"):
            raise FncError(f"unknown objective {self.objective!r}")
        if self.objective == "tts_eps" and not (0 < self.epsilon < 1):
            raise FncError("the weighted objective needs 0 < epsilon < 1")
        for c in self.network.cells:
            if isinstance(c.fd, CapacityDrop):
                raise FncError(f"cell {c.label} has a capacity-drop diagram; the relaxation needs concave curves")

    @property
    def T(self) -> int:
        return self.demand.shape[0]

    @property
    def initial(self) -> np.ndarray:
        r = self.network.initial_density if self.rho0 is None else np.asarray(self.rho0, dtype=float)
        return r.copy()

    @property
    def eps(self) -> float:
        return self.epsilon if self.objective == "tts_eps" else 0.0


def pwa_network(network: Network, K: int = 32) -> Network:
    """The same network with every diagram replaced by its secant interpolation."""
    return network.with_fds([pwa_discretize(c.fd, K) for c in network.cells])


def heuristic_objective_coeffs(network: Network, epsilon: float, T: int | None = None) -> np.ndarray:
    """Per-cell weights l_e, lowered to (1 - epsilon) l_e on metered onramps; (T, n) when T is given."""
    if not (0 <= epsilon < 1):
        raise FncError("epsilon must lie in [0, 1)")
    w = network.lengths.copy()
    ramps = list(network.n_asymmetric)
    w[ramps] *= 1.0 - epsilon
    return w if T is None else np.tile(w, (T, 1))


# ---------------------------------------------------------------------------
# problem layout

@dataclass
class _Family:
    """Sloped lines of one cell's demand or supply; one candidate row per line and step."""
    kind: str                 # "demand" or "supply"
    cell: int                 # cell whose density enters the row
    flows: np.ndarray         # cells whose flows enter the row
    coefs: np.ndarray         # their coefficients
    slopes: np.ndarray        # line slopes (cars/h per car/km)
    intercepts: np.ndarray    # line intercepts (cars/h)


@dataclass
class ProblemSize:
    variables: int
    equality_rows: int
    inequality_rows: int
    candidate_rows: int
    bounded_variables: int
    convention_variables: int
    convention_rows: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class RelaxedModel:
    """Index layout, bounds and line families of the relaxed problem for one spec."""

    def __init__(self, spec: FncSpec):
        self.spec = spec
        net = spec.network
        self.net = net
        self.pwa = pwa_network(net, spec.K)
        self.T, self.n = spec.T, net.n
        self.dt = net.dt_h
        self.l = net.lengths
        self.rho0 = spec.initial
        T, n, dt = self.T, self.n, self.dt
        self.nq = T * n
        self.nv = 2 * T * n
        fds: list[Pwa] = [c.fd for c in self.pwa.cells]

        # cost on n_e(t): dt * weight_e / l_e, so the objective is in car-hours
        weights = heuristic_objective_coeffs(net, spec.eps)
        self.weights = weights
        c = np.zeros(self.nv)
        c[self.nq:] = np.tile(dt * weights / self.l, T)
        self.c = c

        lo = np.zeros(self.nv)
        hi = np.full(self.nv, math.inf)
        qhi = hi[:self.nq].reshape(T, n)
        nhi = hi[self.nq:].reshape(T, n)
        rb = np.array([fd.rho_bar for fd in fds])
        rb[net.infinite] = math.inf
        nhi[:] = self.l * rb
        self.capped: list[int] = []
        if spec.queue_caps:
            for e in net.sources:
                cap = net.cells[e].queue_cap_cars
                if cap is None:
                    continue
                if self.rho0[e] * self.l[e] > cap + 1e-9:
                    raise FncError(f"initial queue on {net.cells[e].label} exceeds its cap of {cap} cars")
                nhi[:, e] = np.minimum(nhi[:, e], cap)
                self.capped.append(e)

        # demand: constant lines are bounds; at t = 0 the whole demand is a bound
        self.families: list[_Family] = []
        const_rows = []          # (flows, coefs, rhs per step) for multi-inlet constant supply
        d0 = np.array([fd.demand(float(r)) for fd, r in zip(fds, self.rho0)])
        qhi[0] = np.minimum(qhi[0], dt * d0)
        for e, fd in enumerate(fds):
            lines = np.array(fd.demand_lines())
            flat = lines[:, 0] == 0
            if flat.any():
                qhi[1:, e] = np.minimum(qhi[1:, e], dt * lines[flat, 1].min())
            if (~flat).any():
                self.families.append(_Family("demand", e, np.array([e]), np.array([1.0]),
                                             lines[~flat, 0], lines[~flat, 1]))
        for i, fd in enumerate(fds):
            ups = np.array(net.upstream[i], dtype=int)
            if ups.size == 0 or net.infinite[i] or fd.supply_pts is None:
                continue
            betas = np.array([net.beta[(i, j)] for j in ups])
            lines = np.array(fd.supply_lines())
            flat = lines[:, 0] == 0
            s0 = float(fd.supply(float(self.rho0[i])))
            if ups.size == 1:
                qhi[0, ups[0]] = min(qhi[0, ups[0]], dt * s0 / betas[0])
                if flat.any():
                    qhi[1:, ups[0]] = np.minimum(qhi[1:, ups[0]], dt * lines[flat, 1].min() / betas[0])
            else:
                rhs = np.full(T, math.inf)
                rhs[0] = dt * s0
                if flat.any():
                    rhs[1:] = dt * lines[flat, 1].min()
                const_rows.append((i, ups, betas, rhs))
            if (~flat).any():
                self.families.append(_Family("supply", i, ups, betas, lines[~flat, 0], lines[~flat, 1]))
        self.lo, self.hi = lo, hi
        self.const_rows = const_rows
        # candidate row selection: one boolean mask (lines, T) per family; column t = 0 unused
        self.selected = [np.zeros((f.slopes.size, T), dtype=bool) for f in self.families]
        self._eq = self._equalities()
        self._const = self._constant_rows()

    # -- indices ------------------------------------------------------------
    def qi(self, t, e):
        return np.asarray(t) * self.n + np.asarray(e)

    def ni(self, t, e):
        """Index of n_e(t) for t >= 1."""
        return self.nq + (np.asarray(t) - 1) * self.n + np.asarray(e)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (rho (T+1, n), phi (T, n)) from a variable vector."""
        T, n = self.T, self.n
        phi = x[:self.nq].reshape(T, n) / self.dt
        rho = np.empty((T + 1, n))
        rho[0] = self.rho0
        rho[1:] = x[self.nq:].reshape(T, n) / self.l
        return rho, phi

    def pack(self, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
        return np.concatenate([(phi * self.dt).ravel(), (rho[1:] * self.l).ravel()])

    # -- rows ---------------------------------------------------------------
    def _equalities(self):
        """n(t+1) - n(t) + q(t) - B q(t) = dt w(t) (+ n(0) at t = 0)."""
        T, n = self.T, self.n
        IB = sp.csr_matrix(np.eye(n) - self.net.B)
        Aq = sp.kron(sp.identity(T), IB)
        An = sp.identity(T * n) - sp.kron(sp.eye(T, k=-1), sp.identity(n))
        A = sp.hstack([Aq, An], format="csr")
        b = self.dt * self.spec.demand.copy()
        b[0] += self.rho0 * self.l
        return A, b.ravel()

    def _constant_rows(self):
        rows, cols, vals, rhs, keys = [], [], [], [], []
        r = 0
        for k, (i, ups, betas, bound) in enumerate(self.const_rows):
            for t in range(self.T):
                if not math.isfinite(bound[t]):
                    continue
                rows += [r] * ups.size
                cols += list(self.qi(t, ups))
                vals += list(betas)
                rhs.append(bound[t])
                keys.append(("supply-cap", i, t))
                r += 1
        A = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.nv))
        return A, np.array(rhs), keys

    def _family_rows(self, f: _Family, k: int, ts: np.ndarray):
        """Sparse rows of line k of family f at steps ts (all >= 1)."""
        m = ts.size
        nf = f.flows.size
        rows = np.repeat(np.arange(m), nf + 1)
        cols = np.empty((m, nf + 1), dtype=np.int64)
        vals = np.empty((m, nf + 1))
        cols[:, :nf] = self.qi(ts[:, None], f.flows[None, :])
        vals[:, :nf] = f.coefs
        cols[:, nf] = self.ni(ts, f.cell)
        vals[:, nf] = -self.dt * f.slopes[k] / self.l[f.cell]
        A = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, self.nv))
        return A, np.full(m, self.dt * f.intercepts[k])

    def select_all(self):
        for m in self.selected:
            m[:, 1:] = True

    def row_keys(self) -> np.ndarray:
        """Stable integer key of every selected sloped row, in assembly order."""
        keys = []
        base = 0
        for f, m in zip(self.families, self.selected):
            L = f.slopes.size
            ks, ts = np.nonzero(m)
            order = np.lexsort((ts, ks))
            keys.append(base + ks[order] * self.T + ts[order])
            base += L * self.T
        return np.concatenate(keys) if keys else np.zeros(0, dtype=np.int64)

    def problem(self) -> LpProblem:
        blocks, rhs = [self._const[0]], [self._const[1]]
        for f, m in zip(self.families, self.selected):
            for k in range(f.slopes.size):
                ts = np.flatnonzero(m[k])
                if ts.size:
                    A, b = self._family_rows(f, k, ts)
                    blocks.append(A)
                    rhs.append(b)
        A_ub = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, self.nv))
        b_ub = np.concatenate(rhs)
        A_eq, b_eq = self._eq
        return LpProblem(self.c, A_ub, b_ub, A_eq, b_eq, self.lo, self.hi)

    # -- violations of the full line set ------------------------------------
    def violations(self, x: np.ndarray, tol: float) -> int:
        """Select every line that x violates by more than tol; returns the number added."""
        T = self.T
        Q = x[:self.nq].reshape(T, self.n)
        N = x[self.nq:].reshape(T, self.n)
        added = 0
        for f, m in zip(self.families, self.selected):
            if T < 2:
                break
            lhs = Q[1:, f.flows] @ f.coefs                       # steps 1..T-1
            rho = N[:-1, f.cell] / self.l[f.cell]
            vals = self.dt * (f.slopes[:, None] * rho[None, :] + f.intercepts[:, None])
            excess = lhs[None, :] - vals                        # (lines, T-1)
            viol = excess > tol
            if not viol.any():
                continue
            # add only the most violated line at each step
            worst = np.argmax(np.where(viol, excess, -np.inf), axis=0)
            ts = np.flatnonzero(viol.any(axis=0))
            new = ~m[worst[ts], ts + 1]
            m[worst[ts], ts + 1] = True
            added += int(new.sum())
        return added

    def max_violation(self, x: np.ndarray) -> float:
        T = self.T
        Q = x[:self.nq].reshape(T, self.n)
        N = x[self.nq:].reshape(T, self.n)
        worst = 0.0
        for f in self.families:
            if T < 2:
                break
            lhs = Q[1:, f.flows] @ f.coefs
            rho = N[:-1, f.cell] / self.l[f.cell]
            vals = self.dt * (f.slopes[:, None] * rho[None, :] + f.intercepts[:, None])
            worst = max(worst, float((lhs[None, :] - vals).max()))
        return worst

    def select_near(self, x: np.ndarray, band: float):
        """Select lines within ``band`` (cars per step) of the binding one at state x."""
        T = self.T
        N = x[self.nq:].reshape(T, self.n)
        for f, m in zip(self.families, self.selected):
            if T < 2:
                break
            rho = N[:-1, f.cell] / self.l[f.cell]
            vals = self.dt * (f.slopes[:, None] * rho[None, :] + f.intercepts[:, None])
            lowest = vals.min(axis=0)
            # the flat part of the curve is a bound; only sloped lines near it matter
            m[:, 1:] |= vals <= lowest[None, :] + band

    # -- sizes --------------------------------------------------------------
    def size(self, problem: LpProblem | None = None) -> ProblemSize:
        T, n = self.T, self.n
        cand = sum(f.slopes.size for f in self.families) * max(T - 1, 0) + self._const[0].shape[0]
        fam = 3 + (1 if self.capped else 0)
        n_ub = problem.n_ub if problem is not None else int(sum(m.sum() for m in self.selected)) + self._const[0].shape[0]
        bounded = int(np.sum(np.isfinite(self.hi)))
        return ProblemSize(self.nv, self.nq, n_ub, cand, bounded, 2 * T * n, fam * T * n)


def build_relaxed(spec: FncSpec) -> LpProblem:
    """The relaxed problem with every line of every discretized curve as a row."""
    model = RelaxedModel(spec)
    model.select_all()
    return model.problem()


def problem_size(spec: FncSpec) -> ProblemSize:
    """Sizes of the full relaxed problem, with the families-times-cells-times-steps row count."""
    model = RelaxedModel(spec)
    model.select_all()
    return model.size()


# ---------------------------------------------------------------------------
# crash start

def vertex_simulation(network: Network, rho0: np.ndarray, demand: np.ndarray) -> Trajectory:
    """Unmetered run whose flows sit at vertices of the relaxed feasible set.

    Onramps release min(demand, supply); symmetric merges fill the outlet
    supply inlet by inlet in index order.
    """
    T, n = demand.shape
    rho = np.empty((T + 1, n))
    rho[0] = rho0
    phi = np.zeros((T, n))
    fds = [c.fd for c in network.cells]
    inf = network.infinite
    sym = [(network.out_cells[v][0], network.in_cells[v]) for v in sorted(network.symmetric)]
    pairs = network.asymmetric_pairs
    free = [(e, network.downstream[e]) for e in network.n_free]
    nu = list(network.n_subcritical)
    for t in range(T):
        r = rho[t]
        d = np.array([fd.demand(float(x)) for fd, x in zip(fds, r)])
        s = np.array([math.inf if inf[k] or fds[k].rho_bar == math.inf else float(fds[k].supply(float(x)))
                      for k, x in enumerate(r)])
        f = phi[t]
        for i, ins in sym:
            left = s[i]
            for e in ins:
                b = network.beta[(i, e)]
                f[e] = min(d[e], max(left, 0.0) / b)
                left -= b * f[e]
        res = s.copy()
        for i, e, j in pairs:
            b = network.beta[(i, j)]
            f[j] = min(d[j], s[i] / b)
            res[i] = s[i] - b * f[j]
        for e, outs in free:
            cap = d[e]
            for i in outs:
                cap = min(cap, max(res[i], 0.0) / network.beta[(i, e)])
            f[e] = cap
        f[nu] = d[nu]
        rho[t + 1] = advance(network, r, f, demand[t])
    inputs = np.full((T, n), np.nan)
    ctrl = list(network.controlled)
    inputs[:, ctrl] = phi[:, ctrl]
    return Trajectory(network, rho, phi, inputs, demand)


def crash_basis(problem: LpProblem, model: RelaxedModel, x: np.ndarray) -> Basis:
    """Triangular starting basis that reproduces the vertex point x.

    Each n_e(t+1) is basic in its conservation row.  A flow strictly inside
    its bounds takes a tight inequality row it appears in, preferring rows
    with a single flow; every other inequality keeps its slack basic.
    """
    nv, m_ub = problem.n_vars, problem.n_ub
    A = problem.A_ub.tocsc()
    R = problem.A_ub.tocsr()
    slack = problem.b_ub - problem.A_ub @ x
    scale = 1.0 + np.abs(problem.b_ub)
    tight = np.abs(slack) <= _TIGHT * scale
    # number of flow variables per row: rows holding one flow are claimed first
    nflows = np.diff(R.indptr) - np.array([np.count_nonzero(R.indices[R.indptr[r]:R.indptr[r + 1]] >= model.nq)
                                           for r in range(m_ub)], dtype=int)
    owner = np.full(m_ub, -1)
    at_upper = np.zeros(nv + problem.n_rows, dtype=bool)
    basic_q = []
    lo, hi = problem.lo, problem.hi
    for q in range(model.nq):
        v = x[q]
        if v <= lo[q] + _TIGHT * (1 + abs(lo[q])):
            continue
        if v >= hi[q] - _TIGHT * (1 + abs(hi[q])):
            at_upper[q] = True
            continue
        rows = A.indices[A.indptr[q]:A.indptr[q + 1]]
        rows = rows[tight[rows] & (owner[rows] < 0)]
        if rows.size == 0:
            continue           # not at a vertex here; the solver repairs the resulting point
        r = rows[np.argmin(nflows[rows])]
        owner[r] = q
        basic_q.append(q)
    basic = np.concatenate([np.arange(model.nq, nv),                  # n variables
                            np.array(basic_q, dtype=np.int64),
                            nv + np.flatnonzero(owner < 0)])          # untouched slacks
    return Basis(basic.astype(np.int64), at_upper)


def _extend_basis(basis: Basis, nv: int, old_keys: np.ndarray, new_keys: np.ndarray, n_const: int,
                  n_eq: int) -> Basis:
    """Carry a basis over to a problem with additional inequality rows."""
    old_m_ub = n_const + old_keys.size
    new_m_ub = n_const + new_keys.size
    pos = np.searchsorted(new_keys, old_keys) if new_keys.size else np.zeros(0, dtype=int)
    # map old logical indices to new ones
    remap = np.empty(old_m_ub + n_eq, dtype=np.int64)
    remap[:n_const] = np.arange(n_const)
    remap[n_const:old_m_ub] = n_const + pos
    remap[old_m_ub:] = new_m_ub + np.arange(n_eq)

    def mv(idx):
        idx = np.asarray(idx, dtype=np.int64)
        out = idx.copy()
        lg = idx >= nv
        out[lg] = nv + remap[idx[lg] - nv]
        return out

    basic = mv(basis.basic)
    fresh = np.ones(new_m_ub, dtype=bool)
    fresh[:n_const] = False
    fresh[n_const + pos] = False
    basic = np.concatenate([basic, nv + np.flatnonzero(fresh)])
    at_upper = np.zeros(nv + new_m_ub + n_eq, dtype=bool)
    up = np.flatnonzero(basis.at_upper)
    at_upper[mv(up)] = True
    return Basis(basic, at_upper)


# ---------------------------------------------------------------------------
# solve and recover

@dataclass
class RelaxedResult:
    rho: np.ndarray                # (T+1, n)
    phi: np.ndarray                # (T, n)
    inputs: np.ndarray             # (T, n), NaN on uncontrolled cells
    objective: float               # car-hours, weighted by the objective
    lp: LpSolution
    size: ProblemSize
    rounds: int
    seconds: float
    log: list[dict] = field(default_factory=list)


def solve_relaxed(spec: FncSpec, options: SolveOptions | None = None, *, lazy: bool = True,
                  band: float | None = None, max_rounds: int = 50) -> RelaxedResult:
    """Solve the relaxed problem; lines of the discretized curves enter as they become binding."""
    t0 = time.perf_counter()
    opts = options or SolveOptions()
    model = RelaxedModel(spec)
    net = model.pwa
    start = None
    # an external solver takes the whole problem at once; line generation suits the warm-started simplex
    lazy = lazy and opts.backend == "simplex"
    if lazy:
        sim = vertex_simulation(net, model.rho0, spec.demand)
        x0 = model.pack(sim.rho, sim.phi)
        model.select_near(x0, 1e-6 if band is None else band)
        prob = model.problem()
        start = crash_basis(prob, model, x0)
    else:
        model.select_all()
        prob = model.problem()
    log = []
    tol = max(opts.feas_tol, 1e-9)
    rounds = 0
    n_const = model._const[0].shape[0]
    while True:
        rounds += 1
        keys = model.row_keys()
        sol = solve(prob, opts, start=start)
        log.append(dict(round=rounds, rows=prob.n_ub, status=sol.status.value, iterations=sol.iterations,
                        seconds=round(sol.seconds, 3), objective=sol.objective))
        if sol.status is not Status.OPTIMAL:
            raise SolverFailure(f"relaxed problem: {sol.status.value} after {sol.iterations} iterations", sol)
        if not lazy:
            break
        added = model.violations(sol.x, tol)
        if added == 0:
            break
        if rounds >= max_rounds:
            raise SolverFailure(f"line generation did not settle within {max_rounds} rounds", sol)
        prob = model.problem()
        start = None
        if sol.basis is not None:
            start = _extend_basis(sol.basis, model.nv, keys, model.row_keys(), n_const, model.nq)
    rho, phi = model.split(sol.x)
    inputs = np.full_like(phi, np.nan)
    ctrl = list(spec.network.controlled)
    inputs[:, ctrl] = phi[:, ctrl]
    return RelaxedResult(rho, phi, inputs, float(sol.objective), sol, model.size(prob), rounds,
                         time.perf_counter() - t0, log)


def recover(spec: FncSpec, inputs: np.ndarray) -> Trajectory:
    """Replay the controlled flows through the discretized model; other flows follow the model."""
    net = pwa_network(spec.network, spec.K)
    traj = simulate(net, spec.initial, spec.demand, OpenLoop(np.asarray(inputs, dtype=float)),
                    check_asymmetric=False)
    return traj


def weighted_tts(traj: Trajectory, weights: np.ndarray) -> float:
    """dt * sum over t = 1..T of sum_e weight_e rho_e(t)."""
    return float(traj.dt * np.sum(traj.rho[1:] @ weights))


@dataclass
class FncSolution:
    spec: FncSpec
    relaxed: RelaxedResult
    recovered: Trajectory
    objective_relaxed: float
    objective_recovered: float
    tts_relaxed: float
    tts_recovered: float
    asymmetric: AsymmetricReport

    @property
    def inputs(self) -> np.ndarray:
        return self.relaxed.inputs

    @property
    def gap(self) -> float:
        return exactness_gap(self)


def exactness_gap(sol: FncSolution) -> float:
    """|recovered - relaxed| / max(relaxed, 1 car-hour), in the optimized objective."""
    return abs(sol.objective_recovered - sol.objective_relaxed) / max(sol.objective_relaxed, 1.0)


def optimize(spec: FncSpec, options: SolveOptions | None = None, **kw) -> FncSolution:
    rel = solve_relaxed(spec, options, **kw)
    traj = recover(spec, rel.inputs)
    w = heuristic_objective_coeffs(spec.network, spec.eps)
    l = spec.network.lengths
    rel_traj = Trajectory(traj.network, rel.rho, rel.phi, rel.inputs, spec.demand)
    return FncSolution(spec, rel, traj, rel.objective, weighted_tts(traj, w), weighted_tts(rel_traj, l),
                       weighted_tts(traj, l), check_asymmetric_condition(traj))
