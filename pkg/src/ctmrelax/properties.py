"""Sampled property suites: invariance, monotonicity, concavity, identities and LP accuracy."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import cctm
from .lp import LpProblem, Status, solve
from .network import Network
from .sim import Uncontrolled, random_policy, simulate, step

SUITES = ("invariance", "monotone", "concave", "identity", "lp")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class SuiteResult:
    suite: str
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)


@dataclass
class Target:
    """A network with a demand profile to sample around."""
    name: str
    network: Network
    demand: np.ndarray


# ---------------------------------------------------------------------------
# invariance of the density box

def random_state(network: Network, rng: np.random.Generator) -> np.ndarray:
    rb = network.rho_bar
    crit = np.array([c.fd.critical_density for c in network.cells])
    top = np.where(np.isfinite(rb), rb, 3 * crit)
    rho = rng.uniform(0.0, 1.0, network.n) * top
    # put some cells exactly on the box edges
    edge = rng.uniform(size=network.n)
    rho[edge < 0.1] = 0.0
    full = (edge > 0.9) & np.isfinite(rb)
    rho[full] = rb[full]
    return rho


def random_arrivals(network: Network, rng: np.random.Generator) -> np.ndarray:
    w = np.zeros(network.n)
    for e in network.sources:
        w[e] = rng.uniform(0.0, 1.5) * network.cells[e].fd.demand_cap
    return w


def check_invariance(network: Network, steps: int, *, seed: int = 0, name: str = "invariance") -> Check:
    """One step from random admissible states and inputs never leaves [0, rho_bar]."""
    rb = network.rho_bar
    bad = 0
    worst = 0.0
    policy_rng = np.random.default_rng([seed, 1])
    policy = random_policy(policy_rng)
    for k in range(steps):
        rng = np.random.default_rng([seed, 0, k])
        rho = random_state(network, rng)
        u = policy(0, rho, network)
        nxt, _ = step(network, rho, u, random_arrivals(network, rng), check_asymmetric=False)
        excess = max(float(np.max(-nxt)), float(np.max((nxt - rb)[np.isfinite(rb)], initial=-math.inf)))
        if excess > 0:
            bad += 1
            worst = max(worst, excess)
    return Check(name, bad == 0, f"{steps} steps, {bad} outside the box, worst excess {worst:.3e}")


# ---------------------------------------------------------------------------
# monotonicity and concavity of the cumulative maps

def _maps(network: Network, sampler: cctm.RolloutSampler) -> list[tuple[str, Callable]]:
    return [("cumulative demand", cctm.demand_map(network, sampler)),
            ("cumulative supply", cctm.supply_map(network, sampler)),
            ("cumulative step", cctm.step_map(network, sampler))]


def _as_check(rep: cctm.PropertyReport, label: str) -> Check:
    return Check(label, rep.ok, f"{rep.evaluated}/{rep.trials} evaluated, {rep.violations} violations, "
                                f"worst {rep.worst:.3e}")


def monotone_checks(target: Target, trials: int, *, seed: int = 0, tol: float = 1e-7,
                    window: int = 40) -> list[Check]:
    net = target.network
    sampler = cctm.RolloutSampler(net, target.demand[:window])
    return [_as_check(cctm.check_state_monotone(fn, sampler, trials, seed=seed, tol=tol),
                      f"{target.name} {label} monotone") for label, fn in _maps(net, sampler)]


def concave_checks(target: Target, trials: int, *, seed: int = 0, tol: float = 1e-7,
                   window: int = 40) -> list[Check]:
    net = target.network
    sampler = cctm.RolloutSampler(net, target.demand[:window])
    return [_as_check(cctm.check_concavity(fn, sampler, trials, seed=seed, tol=tol),
                      f"{target.name} {label} concave") for label, fn in _maps(net, sampler)]


def proportional_merge_witness(target: Target, trials: int, *, seed: int = 0, tol: float = 1e-7) -> Check:
    """The uncontrolled proportional merge should break monotonicity in cumulative flows."""
    net = target.network
    w = target.demand[-1]
    sampler = cctm.RolloutSampler(net, target.demand, augmented=True, uncontrolled=True)
    fn = cctm.uncontrolled_cumulative_map(net, w, "proportional")
    rep = cctm.check_state_monotone(lambda x, u: fn(x), sampler, trials, seed=seed, tol=tol)
    return Check(f"{target.name} proportional merge non-monotone", rep.violations > 0,
                 f"{rep.violations} witnesses in {rep.evaluated} trials, worst {rep.worst:.3e}")


# ---------------------------------------------------------------------------
# identities

def _random_run(target: Target, rng: np.random.Generator):
    return simulate(target.network, None, target.demand, random_policy(rng), check_asymmetric=False)


def tts_identity_check(target: Target, runs: int, *, seed: int = 0, tol: float = 1e-9) -> Check:
    worst = 0.0
    for k in range(runs):
        traj = _random_run(target, np.random.default_rng([seed, k]))
        worst = max(worst, cctm.tts_identity_gap(traj) / max(traj.tts(), 1e-12))
    return Check(f"{target.name} TTS identity", worst <= tol, f"{runs} runs, worst relative gap {worst:.3e}")


def step_equivalence_check(target: Target, states: int, *, seed: int = 0, tol: float = 1e-9,
                           window: int = 40) -> Check:
    """Stepping in cumulative coordinates agrees with stepping densities."""
    net = target.network
    sampler = cctm.RolloutSampler(net, target.demand[:window])
    dt = net.dt_h
    ctrl = list(net.controlled)
    worst = 0.0
    for k in range(states):
        rng = np.random.default_rng([seed, k])
        Phi, (varphi, t) = sampler.draw(rng)
        W = sampler.W_at(t)
        nxt, hat = cctm.cctm_step(net, Phi, varphi, sampler.rho0, W)
        rho = cctm.densities(net, Phi, sampler.rho0, W)
        u = np.full(net.n, np.nan)
        u[ctrl] = (varphi[ctrl] - Phi[ctrl]) / dt
        _, phi = step(net, rho, u, target.demand[t], check_asymmetric=False)
        worst = max(worst, float(np.max(np.abs(Phi + dt * phi - nxt))),
                    float(np.max(np.abs(hat + nxt[ctrl]), initial=0.0)))
    return Check(f"{target.name} cumulative step equivalence", worst <= tol,
                 f"{states} states, worst difference {worst:.3e} cars")


def roundtrip_checks(target: Target, runs: int, *, seed: int = 0, tol: float = 1e-9) -> list[Check]:
    """Relaxed slacks keep their sign across coordinates, and the coordinate change inverts."""
    net = target.network
    worst_res, signs, worst_rho = 0.0, True, 0.0
    for k in range(runs):
        rng = np.random.default_rng([seed, k])
        traj = cctm.random_relaxed_trajectory(net, target.demand, rng)
        gap, ok = cctm.residual_roundtrip_gap(traj)
        worst_res = max(worst_res, gap)
        signs &= ok
        back = cctm.from_cumulative(cctm.to_cumulative(traj))
        # normwise: recovering a flow differences two large counts, so small flows carry absolute error
        for a, b in ((back.rho, traj.rho), (back.phi, traj.phi)):
            worst_rho = max(worst_rho, float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b))))))
    return [Check(f"{target.name} relaxed residual round trip", worst_res <= tol and signs,
                  f"{runs} runs, worst {worst_res:.3e} cars, signs {'agree' if signs else 'differ'}"),
            Check(f"{target.name} cumulative round trip", worst_rho <= 1e-12,
                  f"{runs} runs, worst relative {worst_rho:.3e}")]


# ---------------------------------------------------------------------------
# LP accuracy

def enumerate_vertices(c, A, b, E, g, lo, hi, chunk: int = 20000) -> float:
    """Minimum of c.x over all basic feasible points; inf when there are none."""
    n = c.size
    G = np.vstack([A, np.eye(n), -np.eye(n)])
    h = np.concatenate([b, hi, -lo])
    k = E.shape[0]
    best = math.inf
    combos = itertools.combinations(range(G.shape[0]), n - k)
    while True:
        batch = list(itertools.islice(combos, chunk))
        if not batch:
            return best
        idx = np.array(batch, dtype=int).reshape(len(batch), n - k)
        M = np.concatenate([np.broadcast_to(E, (len(batch), k, n)), G[idx]], axis=1)
        rhs = np.concatenate([np.broadcast_to(g, (len(batch), k)), h[idx]], axis=1)
        good = np.abs(np.linalg.det(M)) > 1e-9
        if not good.any():
            continue
        x = np.linalg.solve(M[good], rhs[good][..., None])[..., 0]
        feas = np.all(x @ G.T <= h + 1e-9, axis=1)
        if k:
            feas &= np.all(np.abs(x @ E.T - g) <= 1e-9, axis=1)
        if feas.any():
            best = min(best, float(np.min(x[feas] @ c)))


def random_lp(rng: np.random.Generator, max_vars: int = 8, max_rows: int = 12):
    n = int(rng.integers(1, max_vars + 1))
    m = int(rng.integers(1, max(2, min(max_rows, 22 - 2 * n) + 1)))
    k = int(rng.integers(0, min(2, n - 1) + 1)) if n > 1 else 0
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.uniform(-1.0, 3.0, m)
    E = rng.normal(size=(k, n))
    g = E @ rng.uniform(-0.5, 0.5, n)
    lo = -rng.uniform(0.0, 2.0, n)
    hi = rng.uniform(0.0, 2.0, n)
    return c, A, b, E, g, lo, hi


def lp_oracle_check(count: int, *, seed: int = 0, tol: float = 1e-7) -> Check:
    bad = []
    for k in range(count):
        c, A, b, E, g, lo, hi = random_lp(np.random.default_rng([seed, k]))
        ref = enumerate_vertices(c, A, b, E, g, lo, hi)
        sol = solve(LpProblem(c, A, b, E, g, lo, hi))
        if math.isinf(ref):
            if sol.status is not Status.INFEASIBLE:
                bad.append(k)
        elif sol.status is not Status.OPTIMAL or abs(sol.objective - ref) > tol * max(1.0, abs(ref)):
            bad.append(k)
    return Check("random LPs against vertex enumeration", not bad,
                 f"{count} problems, {len(bad)} mismatches" + (f" (first {bad[:5]})" if bad else ""))


def lp_determinism_check(problem: LpProblem, label: str) -> Check:
    a, b = solve(problem), solve(problem)
    same = a.status is b.status and a.objective == b.objective and a.iterations == b.iterations \
        and np.array_equal(a.x, b.x)
    return Check(f"{label} repeated solve identical", same, f"status {a.status.value}, objective {a.objective!r}")


# ---------------------------------------------------------------------------
# driver

@dataclass
class Budget:
    invariance_steps: int = 1000
    trials: int = 500
    identity_runs: int = 20
    step_states: int = 100
    lp_problems: int = 200


def run_suite(suite: str, targets: list[Target], budget: Budget | None = None, *, seed: int = 0,
              merge_target: Target | None = None, lp_target: Target | None = None) -> SuiteResult:
    b = budget or Budget()
    res = SuiteResult(suite)
    if suite == "invariance":
        for t in targets:
            res.checks.append(check_invariance(t.network, b.invariance_steps, seed=seed,
                                               name=f"{t.name} density box"))
    elif suite == "monotone":
        for t in targets:
            res.checks.extend(monotone_checks(t, b.trials, seed=seed))
        if merge_target is not None:
            res.checks.append(proportional_merge_witness(merge_target, b.trials, seed=seed))
    elif suite == "concave":
        for t in targets:
            res.checks.extend(concave_checks(t, b.trials, seed=seed))
    elif suite == "identity":
        for t in targets:
            res.checks.append(tts_identity_check(t, b.identity_runs, seed=seed))
            res.checks.append(step_equivalence_check(t, b.step_states, seed=seed))
            res.checks.extend(roundtrip_checks(t, b.identity_runs, seed=seed))
    elif suite == "lp":
        res.checks.append(lp_oracle_check(b.lp_problems, seed=seed))
        if lp_target is not None:
            from .fnc import FncSpec, build_relaxed
            prob = build_relaxed(FncSpec(lp_target.network, lp_target.demand[:20]))
            res.checks.append(lp_determinism_check(prob, f"{lp_target.name} relaxation"))
    else:
        raise ValueError(f"unknown suite {suite!r}")
    return res


def default_targets() -> tuple[list[Target], Target, Target]:
    """Sampling targets from the bundled scenarios: (general, merge demo, lp)."""
    from .scenario import bundled_path, load
    targets = []
    for name in ("artificial", "rocade", "example1"):
        sc = load(bundled_path(name))
        targets.append(Target(name, sc.network, sc.demand))
    ex2 = load(bundled_path("example2"))
    return targets, Target("example2", ex2.network, ex2.demand), targets[0]


def run_suites(names: list[str] | None = None, budget: Budget | None = None, *, seed: int = 0) -> list[SuiteResult]:
    targets, merge, lp_target = default_targets()
    return [run_suite(s, targets, budget, seed=seed, merge_target=merge, lp_target=lp_target)
            for s in (names or SUITES)]
