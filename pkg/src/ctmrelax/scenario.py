"""Scenario files: strict JSON parsing into networks and demand profiles, and export back."""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .fundamental import (FundamentalDiagramError, apply_capacity_drop, fd_from_spec, ramp_queue,
                          scale_lanes)
from .network import Cell, Network, NetworkError
from .sim import piecewise_constant

TIME_UNITS = {"s": 1 / 3600, "min": 1 / 60, "h": 1.0}

_TOP_KEYS = {"name", "description", "units", "dt_s", "horizon", "fds", "cells", "turning_rates", "junctions",
             "demand", "solver", "control", "mpc", "baseline", "demo"}
_CELL_KEYS = {"id", "length_km", "lanes", "fd", "initial_density", "queue_cap_cars", "infinite_capacity",
              "tail", "head"}
_FD_KEYS = {
    "trapezoidal": {"type", "v", "w", "f_d", "f_s", "rho_bar"},
    "triangular": {"type", "v", "w", "rho_bar"},
    "pwa": {"type", "demand", "supply"},
    "cubic_hermite": {"type", "v0", "rho_c", "capacity", "rho_bar", "w_end"},
    "ramp_queue": {"type", "max_rate"},
    "capacity_drop": {"type", "base", "fraction"},
}
_SOLVER_KEYS = {"pwa_K", "feas_tol", "opt_tol", "backend", "max_iter"}
_CONTROL_KEYS = {"objective", "epsilon", "queue_caps"}
_MPC_KEYS = {"horizon_s", "period_s", "capacity_drop", "objectives", "epsilon", "bottleneck"}
_BASELINE_KEYS = {"merge_model", "priorities"}
_DEMO_KEYS = {"kind", "block", "reference_demand"}
_JUNCTION_KEYS = {"symmetric", "asymmetric", "subcritical"}


class ScenarioError(ValueError):
    """Malformed scenario file."""


@dataclass
class Scenario:
    name: str
    network: Network
    demand: np.ndarray          # (T, n) cars/h
    raw: dict                   # normalized document, the export form
    solver: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    demo: dict = field(default_factory=dict)
    reference_demand: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.demand.shape[0]

    @property
    def dt_s(self) -> float:
        return self.network.dt_h * 3600

    def labels(self) -> list[str]:
        return [c.label for c in self.network.cells]


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise ScenarioError(f"{where}: missing key {key!r}")
    return obj[key]


def load(path: str | Path, *, check: bool = True) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from exc
    return parse(doc, base_dir=path.parent, check=check)


def bundled_names() -> list[str]:
    root = resources.files("ctmrelax") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str) -> Path:
    p = resources.files("ctmrelax") / "scenarios" / f"{name}.json"
    if not p.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return Path(str(p))


def resolve(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    return bundled_path(name_or_path[:-5] if name_or_path.endswith(".json") else name_or_path)


def parse(doc: dict, *, base_dir: Path | None = None, check: bool = True) -> Scenario:
    _check_keys(doc, _TOP_KEYS, "scenario")
    doc = copy.deepcopy(doc)
    units = doc.get("units", {"time": "s"})
    _check_keys(units, {"time"}, "units")
    tu = units.get("time", "s")
    if tu not in TIME_UNITS:
        raise ScenarioError(f"units.time must be one of {sorted(TIME_UNITS)}")
    dt_s = float(_need(doc, "dt_s", "scenario"))
    if not dt_s > 0:
        raise ScenarioError("dt_s must be positive")
    dt_h = dt_s / 3600

    horizon = _need(doc, "horizon", "scenario")
    _check_keys(horizon, {"steps", "duration"}, "horizon")
    if ("steps" in horizon) == ("duration" in horizon):
        raise ScenarioError("horizon: give exactly one of steps or duration")
    if "steps" in horizon:
        T = int(horizon["steps"])
    else:
        T = int(round(float(horizon["duration"]) * TIME_UNITS[tu] / dt_h))
    if T < 1:
        raise ScenarioError("horizon must cover at least one step")

    fd_specs = _need(doc, "fds", "scenario")
    if not isinstance(fd_specs, dict):
        raise ScenarioError("fds: expected an object")
    for key, spec in fd_specs.items():
        kind = spec.get("type") if isinstance(spec, dict) else None
        if kind not in _FD_KEYS:
            raise ScenarioError(f"fds.{key}: unknown type {kind!r}")
        _check_keys(spec, _FD_KEYS[kind], f"fds.{key}")

    cells_doc = _need(doc, "cells", "scenario")
    if not isinstance(cells_doc, list) or not cells_doc:
        raise ScenarioError("cells: expected a nonempty list")
    labels = []
    for k, c in enumerate(cells_doc):
        _check_keys(c, _CELL_KEYS, f"cells[{k}]")
        labels.append(str(_need(c, "id", f"cells[{k}]")))
    if len(set(labels)) != len(labels):
        raise ScenarioError("cells: duplicate ids")
    index = {lab: k for k, lab in enumerate(labels)}

    def cell_ref(lab, where):
        if lab not in index:
            raise ScenarioError(f"{where}: unknown cell {lab!r}")
        return index[lab]

    beta = {}
    for k, tr in enumerate(doc.get("turning_rates", [])):
        _check_keys(tr, {"from", "to", "beta"}, f"turning_rates[{k}]")
        j = cell_ref(_need(tr, "from", f"turning_rates[{k}]"), f"turning_rates[{k}]")
        i = cell_ref(_need(tr, "to", f"turning_rates[{k}]"), f"turning_rates[{k}]")
        if (i, j) in beta:
            raise ScenarioError(f"turning_rates[{k}]: duplicate pair")
        beta[(i, j)] = float(tr["beta"])

    tails, heads = _vertices(cells_doc, beta)

    cells = []
    for k, c in enumerate(cells_doc):
        where = f"cells[{k}]"
        fd_name = _need(c, "fd", where)
        if fd_name not in fd_specs:
            raise ScenarioError(f"{where}: unknown fd {fd_name!r}")
        length = float(_need(c, "length_km", where))
        lanes = int(c.get("lanes", 1))
        try:
            fd, integrator = _build_fd(fd_specs, fd_name, length, dt_h, lanes)
        except (FundamentalDiagramError, KeyError, TypeError) as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
        cap = c.get("queue_cap_cars")
        cells.append(Cell(k, tails[k], heads[k], length, fd, lanes, bool(c.get("infinite_capacity", False)),
                          float(c.get("initial_density", 0.0)), None if cap is None else float(cap),
                          labels[k], integrator))

    junc = doc.get("junctions", {})
    _check_keys(junc, _JUNCTION_KEYS, "junctions")
    sym, sub, asym = set(), set(), {}
    for lab in junc.get("symmetric", []):
        sym.add(cells[cell_ref(lab, "junctions.symmetric")].tail)
    for lab in junc.get("subcritical", []):
        sub.add(cells[cell_ref(lab, "junctions.subcritical")].tail)
    for k, a in enumerate(junc.get("asymmetric", [])):
        _check_keys(a, {"outlet", "ramp"}, f"junctions.asymmetric[{k}]")
        v = cells[cell_ref(_need(a, "outlet", "junctions.asymmetric"), "junctions.asymmetric")].tail
        asym[v] = cell_ref(_need(a, "ramp", "junctions.asymmetric"), "junctions.asymmetric")

    net = Network(tuple(cells), beta, frozenset(sym), asym, frozenset(sub), dt_h)
    if check:
        report = net.validate()
        if not report.ok:
            raise NetworkError(report)

    demand = _demand(doc.get("demand", {}), net, index, T, dt_h, TIME_UNITS[tu], base_dir)

    sections = {}
    for key, allowed in (("solver", _SOLVER_KEYS), ("control", _CONTROL_KEYS), ("mpc", _MPC_KEYS),
                         ("baseline", _BASELINE_KEYS)):
        sec = doc.get(key, {})
        _check_keys(sec, allowed, key)
        sections[key] = sec
    demo = doc.get("demo", {})
    _check_keys(demo, _DEMO_KEYS, "demo")
    reference = None
    if demo:
        if demo.get("kind") not in ("diverge", "merge"):
            raise ScenarioError("demo.kind must be 'diverge' or 'merge'")
        if "block" in demo:
            _check_keys(demo["block"], {"cell", "from_s"}, "demo.block")
            cell_ref(_need(demo["block"], "cell", "demo.block"), "demo.block")
            float(_need(demo["block"], "from_s", "demo.block"))
        if "reference_demand" in demo:
            reference = _demand(demo["reference_demand"], net, index, T, dt_h, TIME_UNITS[tu], base_dir)
    mpc = sections["mpc"]
    if "bottleneck" in mpc:
        cell_ref(mpc["bottleneck"], "mpc.bottleneck")
    return Scenario(str(doc.get("name", "")), net, demand, doc, **sections, demo=demo, reference_demand=reference)


def _vertices(cells_doc, beta):
    """Tail and head vertex ids; cells joined by a turning rate share a vertex."""
    n = len(cells_doc)
    explicit = ["tail" in c or "head" in c for c in cells_doc]
    if any(explicit):
        if not all("tail" in c and "head" in c for c in cells_doc):
            raise ScenarioError("cells: tail/head must be given for every cell or for none")
        return [int(c["tail"]) for c in cells_doc], [int(c["head"]) for c in cells_doc]
    parent = list(range(2 * n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (i, j) in sorted(beta):
        a, b = find(2 * j + 1), find(2 * i)
        if a != b:
            parent[max(a, b)] = min(a, b)
    ids: dict[int, int] = {}
    tails, heads = [], []
    for k in range(n):
        for node, out in ((2 * k, tails), (2 * k + 1, heads)):
            r = find(node)
            out.append(ids.setdefault(r, len(ids)))
    return tails, heads


def _build_fd(specs, name, length, dt_h, lanes):
    spec = specs[name]
    kind = spec["type"]
    if kind == "ramp_queue":
        return ramp_queue(length, dt_h, float(spec["max_rate"])), True
    if kind == "capacity_drop":
        base, _ = _build_fd(specs, spec["base"], length, dt_h, 1)
        return scale_lanes(apply_capacity_drop(base, float(spec["fraction"])), lanes), False
    return scale_lanes(fd_from_spec(spec), lanes), False


def _demand(doc, net, index, T, dt_h, tscale, base_dir):
    if not isinstance(doc, dict):
        raise ScenarioError("demand: expected an object")
    if "csv" in doc:
        _check_keys(doc, {"csv"}, "demand")
        path = Path(doc["csv"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return demand_from_csv(path, net, index, T, dt_h, tscale)
    series = {}
    for lab, pieces in doc.items():
        if lab not in index:
            raise ScenarioError(f"demand: unknown cell {lab!r}")
        e = index[lab]
        if e not in net.sources:
            raise ScenarioError(f"demand: cell {lab!r} is not a source")
        try:
            pts = [(float(t) * tscale, float(r)) for t, r in pieces]
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"demand.{lab}: expected [[t_start, rate], ...]") from exc
        if any(r < 0 for _, r in pts):
            raise ScenarioError(f"demand.{lab}: negative rate")
        series[e] = pts
    return piecewise_constant(T, net.n, dt_h, series)


def demand_from_csv(path, net, index, T, dt_h, tscale=TIME_UNITS["s"]):
    """CSV with a time column followed by one rate column per source cell label."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ScenarioError(f"demand csv {path}: {exc.strerror}") from exc
    header, body = rows[0], rows[1:]
    series = {}
    for col, lab in enumerate(header[1:], start=1):
        if lab not in index:
            raise ScenarioError(f"demand csv: unknown cell {lab!r}")
        series[index[lab]] = [(float(r[0]) * tscale, float(r[col])) for r in body]
    return piecewise_constant(T, net.n, dt_h, series)


def to_dict(sc: Scenario) -> dict:
    """Normalized document; ``parse(to_dict(sc))`` rebuilds an identical network."""
    return copy.deepcopy(sc.raw)


def dump(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(sc), indent=1) + "\n")


def with_capacity_drop(sc: Scenario, fraction: float, cells: list[int] | None = None) -> Network:
    """Plant network whose mainline cells carry a capacity drop of ``fraction``."""
    net = sc.network
    chosen = set(range(net.n)) if cells is None else set(cells)
    fds = []
    for c in net.cells:
        if c.id in chosen and not c.integrator and not c.infinite_capacity:
            fds.append(apply_capacity_drop(c.fd, fraction))
        else:
            fds.append(c.fd)
    return net.with_fds(fds)
