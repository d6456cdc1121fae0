"""Two-run demonstrations: which orderings survive a perturbation, in densities and in cumulative flows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cctm import to_cumulative
from .scenario import Scenario
from .sim import Trajectory, step_uncontrolled

TOL = 1e-9


@dataclass
class DemoResult:
    kind: str
    reference: Trajectory
    perturbed: Trajectory
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _run(sc: Scenario, demand: np.ndarray, blocked: int | None = None, from_step: int = 0) -> Trajectory:
    net = sc.network
    model = sc.baseline.get("merge_model", "proportional")
    T, n = demand.shape
    rho = np.empty((T + 1, n))
    rho[0] = net.initial_density
    phi = np.empty((T, n))
    for t in range(T):
        alpha = None
        if blocked is not None and t >= from_step:
            alpha = np.ones(n)
            alpha[blocked] = 0.0
        rho[t + 1], phi[t] = step_uncontrolled(net, rho[t], demand[t], model, alpha=alpha)
    return Trajectory(net, rho, phi, np.full((T, n), np.nan), demand)


def run_demo(sc: Scenario) -> DemoResult:
    """Reference and perturbed runs of a demo scenario plus its ordering checks."""
    demo = sc.demo
    kind = demo.get("kind")
    if kind == "diverge":
        block = demo["block"]
        e = sc.network.index(block["cell"])
        k = int(round(float(block["from_s"]) / sc.dt_s))
        ref = _run(sc, sc.demand)
        per = _run(sc, sc.demand, blocked=e, from_step=k)
        return DemoResult(kind, ref, per, diverge_checks(ref, per))
    if kind == "merge":
        ref = _run(sc, sc.reference_demand)
        per = _run(sc, sc.demand)
        return DemoResult(kind, ref, per, merge_checks(ref, per))
    raise ValueError(f"scenario {sc.name!r} has no demo section")


def diverge_checks(ref: Trajectory, per: Trajectory) -> dict[str, bool]:
    """Blocking one branch: some density drops below the reference, cumulative flows never rise above it."""
    P_ref, P_per = to_cumulative(ref).Phi, to_cumulative(per).Phi
    return {
        "density_e3_below_reference_somewhere": bool(np.any(per.rho[:, 2] < ref.rho[:, 2] - TOL)),
        "Phi_e1_le_reference_always": bool(np.all(P_per[:, 0] <= P_ref[:, 0] + TOL)),
        "Phi_e3_le_reference_always": bool(np.all(P_per[:, 2] <= P_ref[:, 2] + TOL)),
    }


def merge_checks(ref: Trajectory, per: Trajectory) -> dict[str, bool]:
    """More arrivals at a saturated merge: densities all rise, yet one cumulative flow falls."""
    P_ref, P_per = to_cumulative(ref).Phi, to_cumulative(per).Phi
    return {
        "densities_ge_reference_always": bool(np.all(per.rho >= ref.rho - TOL)),
        "Phi_e1_below_reference_somewhere": bool(np.any(P_per[:, 0] < P_ref[:, 0] - TOL)),
        "Phi_e2_above_reference_somewhere": bool(np.any(P_per[:, 1] > P_ref[:, 1] + TOL)),
    }
