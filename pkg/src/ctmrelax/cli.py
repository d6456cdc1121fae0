"""Command-line front end: validate, simulate, optimize, mpc, properties, export."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import demos, outputs, properties, scenario
from .fnc import FncError, FncSpec, SolverFailure, optimize, pwa_network
from .lp import SolveOptions
from .mpc import MpcConfig, MpcError, run_receding_horizon
from .network import NetworkError
from .sim import (OpenLoop, SimulationError, Trajectory, Uncontrolled, check_asymmetric_condition,
                  conservation_residual, congested, fft, first_congestion_step, greedy_policy, simulate)

OK, FAILED, BAD_INPUT, SOLVER = 0, 1, 2, 3


class InputError(Exception):
    pass


def _load(path: str) -> scenario.Scenario:
    return scenario.load(scenario.resolve(path))


def _objective(text: str | None, control: dict) -> tuple[str, float]:
    """'tts' or 'tts-eps:<epsilon>'; falls back to the scenario's control section."""
    if text is None:
        obj = control.get("objective", "tts")
        return ("tts_eps", float(control.get("epsilon", 0.0))) if obj in ("tts_eps", "tts-eps") else ("tts", 0.0)
    if text == "tts":
        return "tts", 0.0
    if text.startswith("tts-eps:"):
        try:
            return "tts_eps", float(text.split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad epsilon in {text!r}") from exc
    raise InputError(f"objective must be 'tts' or 'tts-eps:<eps>', got {text!r}")


def _options(sc: scenario.Scenario, backend: str | None) -> SolveOptions:
    opts = SolveOptions()
    for key in ("feas_tol", "opt_tol", "max_iter", "backend"):
        if key in sc.solver:
            setattr(opts, key, sc.solver[key])
    if backend:
        opts.backend = backend
    return opts


def _cells(net, mask) -> list[str]:
    return [net.cells[e].label for e in range(net.n) if mask[:, e].any()]


def traffic_metrics(traj, network=None) -> dict:
    net = traj.network if network is None else network
    ff = fft(net, traj.rho[0], traj.w)
    total = traj.tts()
    return {"tts_h": total, "fft_h": ff, "delay_h": total - ff,
            "conservation_residual": conservation_residual(traj),
            "congested_cells": _cells(net, congested(traj))}


# ---------------------------------------------------------------------------
# commands

def cmd_validate(args) -> int:
    sc = scenario.load(scenario.resolve(args.scenario), check=False)
    report = sc.network.validate()
    print(f"{sc.name or args.scenario}: {sc.network.n} cells, dt {sc.dt_s:g} s, {sc.T} steps")
    if report.ok:
        print("clean")
        return OK
    print(report.format())
    return FAILED


def cmd_simulate(args) -> int:
    sc = _load(args.scenario)
    out = Path(args.out) if args.out else None
    if sc.demo:
        res = demos.run_demo(sc)
        for key, ok in res.checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {key}")
        if out:
            outputs.write_bundle(res.reference, out / "reference")
            outputs.write_bundle(res.perturbed, out / "perturbed")
            outputs.write_report({"scenario": sc.name, "demo": res.kind, "checks": res.checks,
                                  "reference": traffic_metrics(res.reference),
                                  "perturbed": traffic_metrics(res.perturbed)}, out / "report.json")
        return OK if res.ok else FAILED
    net = sc.network
    ctl = args.controller
    if ctl == "none":
        base = sc.baseline
        controller = Uncontrolled(base.get("merge_model", "proportional"),
                                  {net.index(k): float(v) for k, v in base.get("priorities", {}).items()} or None)
    elif ctl == "uncontrolled-model":
        controller = greedy_policy
    elif ctl.startswith("csv:"):
        controller = OpenLoop(outputs.read_inputs(ctl[4:], sc.labels(), sc.T, sc.dt_s))
    else:
        raise InputError(f"controller must be none, uncontrolled-model or csv:<path>, got {ctl!r}")
    traj = simulate(net, None, sc.demand, controller, check_asymmetric=False)
    report = {"scenario": sc.name, "controller": ctl, **traffic_metrics(traj)}
    asym = check_asymmetric_condition(traj)
    report["asymmetric_condition_holds"] = asym.ok
    print(f"TTS {report['tts_h']:.6g} h, FFT {report['fft_h']:.6g} h, delay {report['delay_h']:.6g} h")
    print("congested: " + (", ".join(report["congested_cells"]) or "none"))
    if out:
        outputs.write_bundle(traj, out, report)
    return OK


def cmd_optimize(args) -> int:
    sc = _load(args.scenario)
    objective, eps = _objective(args.objective, sc.control)
    caps = args.queue_caps or bool(sc.control.get("queue_caps", False))
    K = int(sc.solver.get("pwa_K", 32))
    spec = FncSpec(sc.network, sc.demand, objective=objective, epsilon=eps, queue_caps=caps, K=K)
    t0 = time.perf_counter()
    sol = optimize(spec, _options(sc, args.backend))
    seconds = time.perf_counter() - t0
    pwa = pwa_network(sc.network, K)
    base = simulate(pwa, None, sc.demand, Uncontrolled(sc.baseline.get("merge_model", "proportional")),
                    check_asymmetric=False)
    rec = sol.recovered
    queues = {}
    for c in sc.network.cells:
        if c.queue_cap_cars is not None:
            queues[c.label] = float(np.max(rec.rho[:, c.id]) * c.length_km)
    report = {
        "scenario": sc.name, "objective": objective, "epsilon": eps, "queue_caps": caps, "pwa_K": K,
        "objective_relaxed": sol.objective_relaxed, "objective_recovered": sol.objective_recovered,
        "tts_relaxed_h": sol.tts_relaxed, "tts_recovered_h": sol.tts_recovered, "exactness_gap": sol.gap,
        "tts_uncontrolled_h": base.tts(),
        "improvement": 1.0 - sol.tts_recovered / base.tts() if base.tts() > 0 else 0.0,
        "congested_cells_uncontrolled": _cells(pwa, congested(base)),
        "congested_cells_optimized": _cells(pwa, congested(rec)),
        "max_queue_cars": queues,
        "asymmetric_condition_holds": sol.asymmetric.ok,
        "asymmetric_min_margin": float(sol.asymmetric.min_margin.min()) if sol.asymmetric.junctions else None,
        "problem_size": sol.relaxed.size.as_dict(),
        "rounds": sol.relaxed.rounds, "seconds": seconds,
    }
    print(f"TTS relaxed {sol.tts_relaxed:.9g} h, recovered {sol.tts_recovered:.9g} h, gap {sol.gap:.3e}")
    print(f"uncontrolled {base.tts():.9g} h, improvement {100 * report['improvement']:.2f}%")
    if args.out:
        out = outputs.write_bundle(rec, args.out, report)
        rel = sol.relaxed
        outputs.write_bundle(Trajectory(pwa, rel.rho, rel.phi, rel.inputs, sc.demand), out / "relaxed")
        outputs.write_inputs(sol.inputs, sc.labels(), sc.dt_s, out / "inputs.csv")
    return OK if sol.gap <= args.gap_tol else FAILED


def _plant(sc: scenario.Scenario, text: str | None):
    if text is None:
        frac = sc.mpc.get("capacity_drop")
        return (scenario.with_capacity_drop(sc, float(frac)) if frac else sc.network), frac
    if text == "same":
        return sc.network, None
    if text.startswith("capacity-drop:"):
        try:
            frac = float(text.split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad fraction in {text!r}") from exc
        return scenario.with_capacity_drop(sc, frac), frac
    raise InputError(f"plant must be 'same' or 'capacity-drop:<frac>', got {text!r}")


def cmd_mpc(args) -> int:
    sc = _load(args.scenario)
    plant, frac = _plant(sc, args.plant)
    if args.objective == "both":
        eps = float(sc.mpc.get("epsilon", 0.1))
        runs = [("tts", 0.0), ("tts_eps", eps)]
    else:
        runs = [_objective(args.objective, {"objective": "tts"})]
    caps = args.queue_caps or bool(sc.control.get("queue_caps", False))
    bottleneck = sc.mpc.get("bottleneck")
    bidx = plant.index(bottleneck) if bottleneck else None
    out = Path(args.out) if args.out else None
    summary = {"scenario": sc.name, "capacity_drop": frac, "runs": {}}
    for objective, eps in runs:
        cfg = MpcConfig.from_seconds(plant, float(sc.mpc.get("horizon_s", 600)), float(sc.mpc.get("period_s", 120)),
                                     objective=objective, epsilon=eps, queue_caps=caps,
                                     K=int(sc.solver.get("pwa_K", 32)), options=_options(sc, args.backend))
        res = run_receding_horizon(cfg, None, sc.demand)
        traj = res.trajectory
        key = objective if objective == "tts" else f"tts_eps_{eps:g}"
        onset = first_congestion_step(traj, bidx) if bidx is not None else None
        info = {**traffic_metrics(traj), "solves": len(res.log), "clipped_steps": res.clipped_steps,
                "bottleneck": bottleneck, "bottleneck_onset_s": None if onset is None else onset * sc.dt_s}
        summary["runs"][key] = info
        print(f"{key}: TTS {info['tts_h']:.9g} h over {len(res.log)} solves, "
              f"bottleneck onset {info['bottleneck_onset_s']}")
        if out:
            outputs.write_bundle(traj, out / key, info)
            with open(out / key / "solves.csv", "w") as fh:
                fh.write("t_s,status,objective,rows,variables,iterations,seconds\n")
                for r in res.log:
                    fh.write(f"{r['t'] * sc.dt_s:g},{r['status']},{outputs.fmt(r['objective'])},{r['rows']},"
                             f"{r['variables']},{r['iterations']},{r['seconds']}\n")
    status = OK
    if len(runs) == 2:
        a, b = summary["runs"].values()
        later = b["bottleneck_onset_s"] is None or (a["bottleneck_onset_s"] is not None
                                                     and b["bottleneck_onset_s"] >= a["bottleneck_onset_s"])
        checks = {"heuristic_tts_not_worse": b["tts_h"] <= a["tts_h"], "onset_not_earlier": later}
        summary["checks"] = checks
        for k, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {k}")
        status = OK if all(checks.values()) else FAILED
    if out:
        outputs.write_report(summary, out / "report.json")
    return status


def cmd_properties(args) -> int:
    names = list(properties.SUITES) if args.suite == "all" else [args.suite]
    budget = properties.Budget()
    if args.trials is not None:
        budget.trials = args.trials
    results = properties.run_suites(names, budget, seed=args.seed)
    for res in results:
        for c in res.checks:
            print(f"[{res.suite}] {c.line()}")
    if args.out:
        outputs.write_report({r.suite: {c.name: {"ok": c.ok, "detail": c.detail} for c in r.checks}
                              for r in results}, args.out)
    return OK if all(r.ok for r in results) else FAILED


def cmd_export(args) -> int:
    sc = _load(args.scenario)
    if args.out:
        scenario.dump(sc, args.out)
    else:
        print(json.dumps(scenario.to_dict(sc), indent=1))
    return OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmrelax", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario against the structural assumptions")
    v.add_argument("scenario", help="path or bundled scenario name")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="forward simulation (or the demo comparison for demo scenarios)")
    s.add_argument("scenario")
    s.add_argument("--controller", default="none", help="none | uncontrolled-model | csv:<path>")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("optimize", help="solve the relaxed control problem and recover a trajectory")
    o.add_argument("scenario")
    o.add_argument("--objective", help="tts | tts-eps:<eps> (default: scenario control section)")
    o.add_argument("--queue-caps", action="store_true")
    o.add_argument("--backend", choices=["simplex", "highs"])
    o.add_argument("--gap-tol", type=float, default=1e-6)
    o.add_argument("--out")
    o.set_defaults(func=cmd_optimize)

    m = sub.add_parser("mpc", help="receding-horizon control on a possibly mismatched plant")
    m.add_argument("scenario")
    m.add_argument("--plant", help="same | capacity-drop:<frac> (default: scenario mpc section)")
    m.add_argument("--objective", default="both", help="tts | tts-eps:<eps> | both")
    m.add_argument("--queue-caps", action="store_true")
    m.add_argument("--backend", choices=["simplex", "highs"])
    m.add_argument("--out")
    m.set_defaults(func=cmd_mpc)

    pr = sub.add_parser("properties", help="sampled theory checks on the bundled networks")
    pr.add_argument("--suite", default="all", choices=["all", *properties.SUITES])
    pr.add_argument("--trials", type=int)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", help="JSON report path")
    pr.set_defaults(func=cmd_properties)

    e = sub.add_parser("export", help="write the normalized scenario document")
    e.add_argument("scenario")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (scenario.ScenarioError, NetworkError, InputError, FncError, MpcError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return BAD_INPUT
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return SOLVER
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
