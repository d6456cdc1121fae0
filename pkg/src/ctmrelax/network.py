"""Freeway graph: cells as directed edges, junction classes and structural checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .fundamental import FundamentalDiagram, UNBOUNDED


class NetworkError(ValueError):
    def __init__(self, report: "ValidationReport"):
        super().__init__("invalid network:\n" + report.format())
        self.report = report


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, subject: str, message: str) -> None:
        self.violations.append(Violation(code, subject, message))

    def extend(self, other: "ValidationReport") -> "ValidationReport":
        self.violations.extend(other.violations)
        return self

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def format(self) -> str:
        if self.ok:
            return "clean"
        return "\n".join(f"[{v.code}] {v.subject}: {v.message}" for v in self.violations)


@dataclass(frozen=True)
class Cell:
    """One road segment.  ``fd`` already includes the lane scaling."""

    id: int
    tail: int
    head: int
    length_km: float
    fd: FundamentalDiagram
    lanes: int = 1
    infinite_capacity: bool = False
    initial_density: float = 0.0
    queue_cap_cars: float | None = None
    name: str = ""
    # onramp store whose demand speed is l/dt; excluded from the step-size bound
    integrator: bool = False

    @property
    def label(self) -> str:
        return self.name or f"c{self.id}"

    @property
    def rho_bar(self) -> float:
        return math.inf if self.infinite_capacity else self.fd.rho_bar

    def demand(self, rho):
        return self.fd.demand(rho)

    def supply(self, rho):
        if self.infinite_capacity:
            return UNBOUNDED
        return self.fd.supply(rho)


@dataclass(frozen=True)
class Network:
    cells: tuple[Cell, ...]
    beta: Mapping[tuple[int, int], float]
    symmetric: frozenset[int]
    asymmetric: Mapping[int, int]
    subcritical: frozenset[int]
    dt_h: float

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "beta", dict(self.beta))
        object.__setattr__(self, "symmetric", frozenset(self.symmetric))
        object.__setattr__(self, "asymmetric", dict(self.asymmetric))
        object.__setattr__(self, "subcritical", frozenset(self.subcritical))
        for k, c in enumerate(self.cells):
            if c.id != k:
                raise ValueError("cell ids must be 0..n-1 in order")

    # ---- topology -------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.cells)

    @cached_property
    def vertices(self) -> tuple[int, ...]:
        return tuple(sorted({c.tail for c in self.cells} | {c.head for c in self.cells}))

    @cached_property
    def in_cells(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {v: [] for v in self.vertices}
        for c in self.cells:
            out[c.head].append(c.id)
        return {v: tuple(x) for v, x in out.items()}

    @cached_property
    def out_cells(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {v: [] for v in self.vertices}
        for c in self.cells:
            out[c.tail].append(c.id)
        return {v: tuple(x) for v, x in out.items()}

    @cached_property
    def downstream(self) -> tuple[tuple[int, ...], ...]:
        """E+(e): cells whose tail is the head of e."""
        return tuple(self.out_cells[c.head] for c in self.cells)

    @cached_property
    def upstream(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.in_cells[c.tail] for c in self.cells)

    @cached_property
    def merges(self) -> frozenset[int]:
        return frozenset(v for v, ins in self.in_cells.items() if len(ins) > 1)

    @cached_property
    def diverges(self) -> frozenset[int]:
        return frozenset(v for v, outs in self.out_cells.items() if len(outs) > 1)

    @cached_property
    def sources(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.cells if not self.in_cells[c.tail])

    @cached_property
    def sinks(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.cells if not self.out_cells[c.head])

    # ---- junction classes -----------------------------------------------
    @cached_property
    def n_symmetric(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.cells if c.head in self.symmetric)

    @cached_property
    def n_asymmetric(self) -> tuple[int, ...]:
        ramps = set(self.asymmetric.values())
        return tuple(c.id for c in self.cells if c.id in ramps)

    @cached_property
    def n_subcritical(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.cells if c.head in self.subcritical)

    @cached_property
    def n_free(self) -> tuple[int, ...]:
        """Cells in L: outflow is min(demand, supply) under FIFO."""
        taken = set(self.n_symmetric) | set(self.n_asymmetric) | set(self.n_subcritical)
        return tuple(c.id for c in self.cells if c.id not in taken)

    @cached_property
    def controlled(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.n_symmetric) | set(self.n_asymmetric)))

    @cached_property
    def controlled_mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[list(self.controlled)] = True
        return m

    @cached_property
    def symmetric_outlets(self) -> tuple[int, ...]:
        return tuple(sorted(i for v in self.symmetric for i in self.out_cells.get(v, ())))

    @cached_property
    def asymmetric_pairs(self) -> tuple[tuple[int, int, int], ...]:
        """(outlet i, mainline e, ramp j) for every asymmetric junction."""
        out = []
        for v, j in sorted(self.asymmetric.items()):
            outs = self.out_cells.get(v, ())
            mains = [e for e in self.in_cells.get(v, ()) if e != j]
            if len(outs) == 1 and len(mains) == 1:
                out.append((outs[0], mains[0], j))
        return tuple(out)

    # ---- numeric views ---------------------------------------------------
    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([c.length_km for c in self.cells])

    @cached_property
    def B(self) -> np.ndarray:
        """Dense turning-rate matrix, B[i, j] = beta_{i,j}."""
        m = np.zeros((self.n, self.n))
        for (i, j), b in self.beta.items():
            m[i, j] = b
        return m

    @cached_property
    def exit_fraction(self) -> np.ndarray:
        """c_hat_e = 1 - sum_i beta_{i,e}: share of the outflow that leaves the network."""
        return 1.0 - self.B.sum(axis=0)

    @cached_property
    def rho_bar(self) -> np.ndarray:
        return np.array([c.rho_bar for c in self.cells])

    @cached_property
    def initial_density(self) -> np.ndarray:
        return np.array([c.initial_density for c in self.cells])

    @cached_property
    def infinite(self) -> np.ndarray:
        return np.array([c.infinite_capacity for c in self.cells])

    def demand(self, rho: np.ndarray) -> np.ndarray:
        return np.array([c.fd.demand(float(r)) for c, r in zip(self.cells, rho)])

    def supply(self, rho: np.ndarray) -> np.ndarray:
        return np.array([UNBOUNDED if c.infinite_capacity else c.fd.supply(float(r))
                         for c, r in zip(self.cells, rho)])

    def index(self, label: str) -> int:
        for c in self.cells:
            if c.label == label:
                return c.id
        raise KeyError(label)

    # ---- validation ------------------------------------------------------
    def validate(self) -> ValidationReport:
        report = validate_graph(self)
        report.extend(validate_merge_partition(self))
        report.extend(validate_turning_rates(self))
        report.extend(validate_cells(self))
        report.extend(validate_step_size(self))
        return report

    def checked(self) -> "Network":
        report = self.validate()
        if not report.ok:
            raise NetworkError(report)
        return self

    def with_fds(self, fds: Iterable[FundamentalDiagram]) -> "Network":
        from dataclasses import replace
        cells = tuple(replace(c, fd=fd) for c, fd in zip(self.cells, fds))
        return replace(self, cells=cells)


def validate_graph(network: Network) -> ValidationReport:
    """Self-loops, vertices that both merge and diverge, and merges without an outlet."""
    report = ValidationReport()
    for c in network.cells:
        if c.tail == c.head:
            report.add("self-loop", c.label, "cell starts and ends at the same vertex")
    for v in sorted(network.merges & network.diverges):
        report.add("merge-and-diverge", f"v{v}", "vertex has several incoming and several outgoing cells")
    for v in sorted(network.merges):
        if not network.out_cells[v]:
            report.add("merge is sink", f"v{v}", "merging junction has no outgoing cell")
    return report


def validate_merge_partition(network: Network) -> ValidationReport:
    report = ValidationReport()
    classes = {"symmetric": network.symmetric, "asymmetric": set(network.asymmetric),
               "subcritical": network.subcritical}
    for name, verts in classes.items():
        for v in sorted(verts):
            if v not in network.merges:
                report.add("not a merge", f"v{v}", f"listed as {name} but has fewer than two incoming cells")
    for v in sorted(network.merges):
        hits = [name for name, verts in classes.items() if v in verts]
        if not hits:
            report.add("merge unclassified", f"v{v}", "merging junction has no junction class")
        elif len(hits) > 1:
            report.add("partition violated", f"v{v}", f"merging junction is in {', '.join(hits)}")
    for v, j in sorted(network.asymmetric.items()):
        ins = network.in_cells.get(v, ())
        if len(ins) != 2:
            report.add("asymmetric arity", f"v{v}", "asymmetric junction needs exactly two incoming cells")
        if j not in ins:
            report.add("asymmetric ramp", f"v{v}", "designated ramp is not an incoming cell")
    for e in network.sources:
        c = network.cells[e]
        if not c.infinite_capacity:
            report.add("finite source", c.label, "source cells must have infinite capacity")
    for v in sorted(network.subcritical):
        for i in network.out_cells.get(v, ()):
            c = network.cells[i]
            if not c.infinite_capacity:
                report.add("finite subcritical outlet", c.label,
                           "cell downstream of a sub-critical junction must have infinite capacity")
    return report


def validate_turning_rates(network: Network) -> ValidationReport:
    report = ValidationReport()
    cells = network.cells
    for (i, j), b in network.beta.items():
        if not (0 <= i < network.n and 0 <= j < network.n):
            report.add("turning rate", f"({i},{j})", "refers to an unknown cell")
            continue
        if cells[j].head != cells[i].tail:
            report.add("turning rate", f"({cells[i].label},{cells[j].label})", "cells are not adjacent")
        if not (0 < b <= 1):
            report.add("turning rate", f"({cells[i].label},{cells[j].label})", f"beta={b} outside (0, 1]")
    for j in range(network.n):
        for i in network.downstream[j]:
            if (i, j) not in network.beta:
                report.add("turning rate", f"({cells[i].label},{cells[j].label})", "adjacent cells without a turning rate")
        total = sum(b for (i, jj), b in network.beta.items() if jj == j)
        if total > 1 + 1e-12:
            report.add("turning rate", cells[j].label, f"outgoing rates sum to {total} > 1")
    return report


def validate_cells(network: Network) -> ValidationReport:
    report = ValidationReport()
    sources = set(network.sources)
    for c in network.cells:
        if not c.length_km > 0:
            report.add("cell", c.label, "length must be positive")
        rb = c.rho_bar
        if not (0 <= c.initial_density <= rb * (1 + 1e-12)):
            report.add("cell", c.label, f"initial density {c.initial_density} outside [0, {rb}]")
        if c.queue_cap_cars is not None:
            if c.id not in sources:
                report.add("queue cap", c.label, "queue caps apply to source cells only")
            if c.queue_cap_cars < 0:
                report.add("queue cap", c.label, "queue cap must be nonnegative")
            elif c.initial_density * c.length_km > c.queue_cap_cars * (1 + 1e-12):
                report.add("queue cap", c.label, "initial queue exceeds its cap")
        if not c.infinite_capacity and math.isinf(c.fd.rho_bar):
            report.add("cell", c.label, "finite-capacity cell needs a finite jam density")
    return report


def max_stable_dt(network: Network) -> float:
    """min l / max(gamma_d, gamma_s) in hours, over cells that are not onramp stores."""
    cells = [c for c in network.cells if not c.integrator]
    if not cells:
        return math.inf
    gamma = 0.0
    for c in cells:
        gd, gs = c.fd.lipschitz()
        if not (math.isfinite(gd) and math.isfinite(gs)):
            raise ValueError(f"cell {c.label} has an unbounded slope")
        gamma = max(gamma, gd, 0.0 if c.infinite_capacity else gs)
    return min(c.length_km for c in cells) / gamma


def validate_step_size(network: Network) -> ValidationReport:
    report = ValidationReport()
    bound = max_stable_dt(network)
    if network.dt_h > bound * (1 + 1e-12):
        report.add("step size", "dt", f"dt = {network.dt_h * 3600:g} s exceeds the bound {bound * 3600:g} s")
    for c in network.cells:
        if c.integrator and c.fd.lipschitz()[0] * network.dt_h > c.length_km * (1 + 1e-12):
            report.add("step size", c.label, "onramp store drains faster than one cell per step")
    return report
