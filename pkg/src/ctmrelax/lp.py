"""Sparse linear programs and an embedded bounded-variable revised simplex solver.

Problems are ``minimize c.x + c0`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``
and ``lo <= x <= hi``.  Internally every row gets a logical variable, so the
working system is ``[A I] (x, s) = b`` with ``s >= 0`` on inequality rows and
``s = 0`` on equality rows.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


class LpError(ValueError):
    pass


@dataclass
class LpProblem:
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c0: float = 0.0
    var_names: list[str] | None = None
    ub_names: list[str] | None = None
    eq_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.A_ub = _as_csr(self.A_ub, n)
        self.A_eq = _as_csr(self.A_eq, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).reshape(-1)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if self.A_ub.shape != (self.b_ub.size, n) or self.A_eq.shape != (self.b_eq.size, n):
            raise LpError("row dimensions do not match the right-hand sides")
        for name, arr in (("c", self.c), ("b_ub", self.b_ub), ("b_eq", self.b_eq),
                          ("A_ub", self.A_ub.data), ("A_eq", self.A_eq.data), ("lo", self.lo), ("hi", self.hi)):
            if np.isnan(arr).any():
                raise LpError(f"NaN in {name}")
        if np.isinf(self.b_ub).any() or np.isinf(self.b_eq).any() or np.isinf(self.c).any():
            raise LpError("infinite coefficient in c or b")
        if np.any(self.lo > self.hi):
            raise LpError("a variable has lo > hi")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_ub(self) -> int:
        return self.b_ub.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def n_rows(self) -> int:
        return self.n_ub + self.n_eq

    @property
    def nnz(self) -> int:
        return self.A_ub.nnz + self.A_eq.nnz

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.c0)

    def residual(self, x: np.ndarray) -> float:
        """Largest violation of rows or bounds at x."""
        r = 0.0
        if self.n_ub:
            r = max(r, float(np.max(self.A_ub @ x - self.b_ub, initial=0.0)))
        if self.n_eq:
            r = max(r, float(np.max(np.abs(self.A_eq @ x - self.b_eq), initial=0.0)))
        r = max(r, float(np.max(self.lo - x, initial=0.0)), float(np.max(x - self.hi, initial=0.0)))
        return r


def _as_csr(A, n):
    if A is None:
        return sp.csr_matrix((0, n))
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


class LpBuilder:
    """Accumulates variables and rows as triplets; ``build`` returns an LpProblem."""

    def __init__(self):
        self.c: list[float] = []
        self.lo: list[float] = []
        self.hi: list[float] = []
        self.names: list[str] = []
        self._rows = {"ub": ([], [], [], [], []), "eq": ([], [], [], [], [])}  # r, col, val, rhs, names

    def add_var(self, name: str = "", lo: float = 0.0, hi: float = math.inf, cost: float = 0.0) -> int:
        self.c.append(cost)
        self.lo.append(lo)
        self.hi.append(hi)
        self.names.append(name or f"x{len(self.c) - 1}")
        return len(self.c) - 1

    def add_row(self, coeffs: dict[int, float] | Sequence[tuple[int, float]], sense: str, rhs: float,
                name: str = "") -> None:
        items = coeffs.items() if isinstance(coeffs, dict) else coeffs
        if sense == ">=":
            items = [(j, -v) for j, v in items]
            rhs = -rhs
            sense = "<="
        key = {"<=": "ub", "==": "eq", "=": "eq"}[sense]
        rows, cols, vals, rhss, names = self._rows[key]
        r = len(rhss)
        for j, v in items:
            rows.append(r)
            cols.append(j)
            vals.append(v)
        rhss.append(rhs)
        names.append(name or f"{key}{r}")

    def build(self, c0: float = 0.0) -> LpProblem:
        n = len(self.c)
        mats = {}
        for key, (rows, cols, vals, rhss, _) in self._rows.items():
            mats[key] = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhss), n))
        return LpProblem(np.array(self.c), mats["ub"], np.array(self._rows["ub"][3]),
                         mats["eq"], np.array(self._rows["eq"][3]), np.array(self.lo), np.array(self.hi),
                         c0=c0, var_names=list(self.names), ub_names=list(self._rows["ub"][4]),
                         eq_names=list(self._rows["eq"][4]))


@dataclass
class Basis:
    """Warm-start information over structural then logical variables.

    ``basic`` lists one variable per row; ``at_upper`` marks nonbasic
    variables resting at their upper bound.
    """
    basic: np.ndarray
    at_upper: np.ndarray


@dataclass
class SolveOptions:
    feas_tol: float = 1e-7
    opt_tol: float = 1e-8
    max_iter: int | None = None
    refactor_every: int = 64
    pivot_tol: float = 1e-9
    rel_pivot_tol: float = 1e-7
    stall_limit: int = 300
    time_limit_s: float | None = None
    backend: str = "simplex"


@dataclass
class LpSolution:
    status: Status
    x: np.ndarray | None
    objective: float
    iterations: int
    residual: float
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    basis: Basis | None = None
    phase1_iterations: int = 0
    seconds: float = 0.0
    backend: str = "simplex"

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def dual_bound(problem: LpProblem, y_ub: np.ndarray, y_eq: np.ndarray) -> float:
    """Lagrangian lower bound from row multipliers (y_ub <= 0); -inf when a bound is missing."""
    y_ub = np.minimum(y_ub, 0.0)
    d = problem.c - problem.A_ub.T @ y_ub - problem.A_eq.T @ y_eq
    val = float(problem.b_ub @ y_ub + problem.b_eq @ y_eq + problem.c0)
    lo, hi = problem.lo, problem.hi
    pos, neg = d > 0, d < 0
    if np.any(pos & np.isinf(lo)) or np.any(neg & np.isinf(hi)):
        return -math.inf
    return val + float(d[pos] @ lo[pos] + d[neg] @ hi[neg])


def solve(problem: LpProblem, options: SolveOptions | None = None, *, start: Basis | None = None,
          **kw) -> LpSolution:
    """Solve with the embedded simplex (default) or scipy's HiGHS when ``backend='highs'``."""
    opts = options or SolveOptions()
    if kw:
        opts = SolveOptions(**{**opts.__dict__, **kw})
    t0 = time.perf_counter()
    if opts.backend == "highs":
        sol = _solve_highs(problem, opts)
    elif opts.backend == "simplex":
        sol = _Simplex(problem, opts).run(start)
    else:
        raise LpError(f"unknown backend {opts.backend!r}")
    sol.seconds = time.perf_counter() - t0
    return sol


def _solve_highs(problem: LpProblem, opts: SolveOptions) -> LpSolution:
    from scipy.optimize import linprog
    bounds = np.column_stack([np.where(np.isinf(problem.lo), None, problem.lo),
                              np.where(np.isinf(problem.hi), None, problem.hi)])
    args = dict(A_ub=problem.A_ub if problem.n_ub else None, b_ub=problem.b_ub if problem.n_ub else None,
                A_eq=problem.A_eq if problem.n_eq else None, b_eq=problem.b_eq if problem.n_eq else None,
                bounds=bounds)
    # status 4 is numerical trouble, not a verdict: presolve is the usual culprit, interior point the backstop
    for method, extra in (("highs", {}), ("highs", {"presolve": False}), ("highs-ipm", {})):
        res = linprog(problem.c, method=method, options=extra, **args)
        if res.status != 4:
            break
    status = {0: Status.OPTIMAL, 1: Status.ITER_LIMIT, 2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(
        res.status, Status.ITER_LIMIT)
    if status is not Status.OPTIMAL:
        return LpSolution(status, None, math.nan, int(res.nit), math.nan, backend="highs")
    x = np.asarray(res.x)
    y_ub = np.asarray(res.ineqlin.marginals) if problem.n_ub else np.zeros(0)
    y_eq = np.asarray(res.eqlin.marginals) if problem.n_eq else np.zeros(0)
    return LpSolution(status, x, problem.objective(x), int(res.nit), problem.residual(x), y_ub, y_eq,
                      backend="highs")


# nonbasic status codes
_BASIC, _LOWER, _UPPER, _FREE, _FIXED = 0, 1, 2, 3, 4


class _Simplex:
    def __init__(self, prob: LpProblem, opts: SolveOptions):
        self.p = prob
        self.o = opts
        n, m = prob.n_vars, prob.n_rows
        self.n, self.m = n, m
        M = sp.vstack([prob.A_ub, prob.A_eq], format="csc") if m else sp.csc_matrix((0, n))
        self.A = sp.hstack([M, sp.identity(m, format="csc")], format="csc")
        self.AT = self.A.T.tocsr()
        self.b = np.concatenate([prob.b_ub, prob.b_eq])
        self.lo = np.concatenate([prob.lo, np.zeros(m)])
        self.hi = np.concatenate([prob.hi, np.full(prob.n_ub, math.inf), np.zeros(prob.n_eq)])
        self.c = np.concatenate([prob.c, np.zeros(m)])
        self.N = n + m
        self.max_iter = opts.max_iter if opts.max_iter is not None else 50 * (n + m) + 1000

    # -- basis handling -------------------------------------------------
    def _initial(self, start: Basis | None):
        N, m = self.N, self.m
        st = np.empty(N, dtype=np.int8)
        fixed = self.lo == self.hi
        st[:] = _LOWER
        st[np.isinf(self.lo) & np.isfinite(self.hi)] = _UPPER
        st[np.isinf(self.lo) & np.isinf(self.hi)] = _FREE
        st[fixed] = _FIXED
        if start is None:
            basic = np.arange(self.n, N)
        else:
            basic = np.asarray(start.basic, dtype=int)
            if basic.size != m or np.unique(basic).size != m:
                raise LpError("warm-start basis has the wrong size or repeats a variable")
            up = np.asarray(start.at_upper, dtype=bool) & np.isfinite(self.hi) & ~fixed
            st[up] = _UPPER
        st[basic] = _BASIC
        x = np.zeros(N)
        x[st == _LOWER] = self.lo[st == _LOWER]
        x[st == _UPPER] = self.hi[st == _UPPER]
        x[st == _FIXED] = self.lo[st == _FIXED]
        self.status, self.basic, self.x = st, basic, x

    def _factor(self):
        B = self.A[:, self.basic]
        self.lu = splu(B.tocsc(), permc_spec="COLAMD", options={"SymmetricMode": False})
        self.etas: list[tuple[int, np.ndarray, np.ndarray, float]] = []
        xn = self.x.copy()
        xn[self.basic] = 0.0
        self.x[self.basic] = self.lu.solve(self.b - self.A @ xn)
        self._good = (self.basic.copy(), self.status.copy(), self.x.copy())

    def _refactor(self):
        # the last basis that factored, so a bad run of pivots can be undone
        good = self._good
        try:
            self._factor()
        except RuntimeError:
            # numerically singular after the updates: go back and demand larger pivots
            basic, status, x = good
            self.basic, self.status, self.x = basic.copy(), status.copy(), x.copy()
            self.rel_ptol = min(1e-2, self.rel_ptol * 100)
            self._factor()

    def _ftran(self, v):
        v = self.lu.solve(v)
        for p, idx, val, ap in self.etas:
            vp = v[p] / ap
            if vp != 0.0:
                v[idx] -= val * vp
            v[p] = vp
        return v

    def _btran(self, c):
        c = c.copy()
        for p, idx, val, ap in reversed(self.etas):
            c[p] = (c[p] - val @ c[idx]) / ap
        return self.lu.solve(c, trans="T")

    def _column(self, q):
        col = np.zeros(self.m)
        s, e = self.A.indptr[q], self.A.indptr[q + 1]
        col[self.A.indices[s:e]] = self.A.data[s:e]
        return col

    # -- main loop ------------------------------------------------------
    def run(self, start: Basis | None) -> LpSolution:
        o = self.o
        self.rel_ptol = o.rel_pivot_tol
        self._initial(start)
        if self.m == 0:
            return self._no_rows()
        try:
            self._factor()
        except RuntimeError:
            if start is None:
                raise
            self._initial(None)
            self._factor()
        tol = o.feas_tol
        it = p1 = 0
        best = math.inf
        since = 0
        bland = False
        last_phase = None
        t_start = time.perf_counter()
        status = Status.ITER_LIMIT
        while it < self.max_iter:
            if o.time_limit_s is not None and time.perf_counter() - t_start > o.time_limit_s:
                break
            xB = self.x[self.basic]
            loB, hiB = self.lo[self.basic], self.hi[self.basic]
            below = xB < loB - tol
            above = xB > hiB + tol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cB = above.astype(float) - below.astype(float)
                obj = float(np.sum(loB[below] - xB[below]) + np.sum(xB[above] - hiB[above]))
                p1 += 1
            else:
                cB = self.c[self.basic]
                obj = float(self.c @ self.x)
            # stall detection for the anti-cycling fallback
            if phase1 is not last_phase:
                best, since, bland, last_phase = math.inf, 0, False, phase1
            scale = 1.0 + abs(obj)
            if obj < best - 1e-11 * scale:
                best, since, bland = obj, 0, False
            else:
                since += 1
                if since > o.stall_limit:
                    bland = True
            y = self._btran(cB)
            d = (0.0 if phase1 else self.c) - self.AT @ y
            st = self.status
            elig = ((st == _LOWER) & (d < -o.opt_tol)) | ((st == _UPPER) & (d > o.opt_tol)) | \
                   ((st == _FREE) & (np.abs(d) > o.opt_tol))
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                status = Status.INFEASIBLE if phase1 else Status.OPTIMAL
                break
            q = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            sigma = 1.0 if d[q] < 0 else -1.0
            alpha = self._ftran(self._column(q))
            res = self._ratio(alpha, sigma, q, below, above, bland)
            if res is None:
                if phase1:
                    # cannot happen for a bounded phase-one objective; treat as numerical trouble
                    self._refactor()
                    it += 1
                    continue
                status = Status.UNBOUNDED
                break
            theta, p, leave_status = res
            delta = -sigma * alpha
            self.x[self.basic] += theta * delta
            self.x[q] += sigma * theta
            if p < 0:
                # entering variable moves to its opposite bound
                self.status[q] = _UPPER if sigma > 0 else _LOWER
                self.x[q] = self.hi[q] if sigma > 0 else self.lo[q]
            else:
                r = self.basic[p]
                self.status[r] = leave_status
                self.x[r] = self.lo[r] if leave_status in (_LOWER, _FIXED) else self.hi[r]
                self.status[q] = _BASIC
                self.basic[p] = q
                ap = alpha[p]
                idx = np.flatnonzero(alpha)
                idx = idx[idx != p]
                self.etas.append((p, idx, alpha[idx], ap))
                if len(self.etas) >= o.refactor_every:
                    self._refactor()
            it += 1
        if status is Status.OPTIMAL:
            self._refactor()
        return self._result(status, it, p1)

    def _ratio(self, alpha, sigma, q, below, above, bland):
        o = self.o
        tol, ptol = o.feas_tol, o.pivot_tol
        delta = -sigma * alpha
        xB = self.x[self.basic]
        loB, hiB = self.lo[self.basic], self.hi[self.basic]
        # bounds that block in each direction; infeasible basics only block on reaching feasibility
        low_lim = np.where(above, hiB, np.where(below, -np.inf, loB))
        up_lim = np.where(below, loB, np.where(above, np.inf, hiB))
        ptol = max(ptol, self.rel_ptol * float(np.max(np.abs(delta), initial=0.0)))
        dec = delta < -ptol
        inc = delta > ptol
        dist = np.full(delta.size, np.inf)
        dist[dec] = xB[dec] - low_lim[dec]
        dist[inc] = up_lim[inc] - xB[inc]
        ad = np.abs(delta)
        mask = (dec | inc) & np.isfinite(dist)
        own = self.hi[q] - self.lo[q]
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            if math.isfinite(own):
                return own, -1, None
            return None
        ratios = np.maximum(dist[idx], 0.0) / ad[idx]
        if bland:
            tmin = ratios.min()
            ties = idx[ratios <= tmin + 1e-12 * (1 + tmin)]
            p = int(ties[np.argmin(self.basic[ties])])
            theta = float(np.maximum(dist[p], 0.0) / ad[p])
        else:
            tmax = float(np.min((np.maximum(dist[idx], 0.0) + tol) / ad[idx]))
            ok = idx[ratios <= tmax]
            p = int(ok[np.argmax(ad[ok])])
            theta = float(np.maximum(dist[p], 0.0) / ad[p])
        if math.isfinite(own) and own <= theta:
            return own, -1, None
        r = self.basic[p]
        if self.lo[r] == self.hi[r]:
            leave = _FIXED
        else:
            leave = _LOWER if dec[p] and low_lim[p] == self.lo[r] else _UPPER
            if inc[p]:
                leave = _UPPER if up_lim[p] == self.hi[r] else _LOWER
        return theta, p, leave

    def _no_rows(self) -> LpSolution:
        c = self.c
        x = self.x
        for j in range(self.n):
            if c[j] < 0:
                if math.isinf(self.hi[j]):
                    return LpSolution(Status.UNBOUNDED, None, -math.inf, 0, math.nan)
                x[j] = self.hi[j]
            elif c[j] > 0:
                if math.isinf(self.lo[j]):
                    return LpSolution(Status.UNBOUNDED, None, -math.inf, 0, math.nan)
                x[j] = self.lo[j]
            else:
                x[j] = self.lo[j] if math.isfinite(self.lo[j]) else min(max(0.0, self.lo[j]), self.hi[j])
        xs = x[:self.n].copy()
        return LpSolution(Status.OPTIMAL, xs, self.p.objective(xs), 0, self.p.residual(xs),
                          np.zeros(0), np.zeros(0), self.c[:self.n].copy())

    def _result(self, status, it, p1) -> LpSolution:
        p = self.p
        x = self.x[:self.n].copy()
        basis = Basis(self.basic.copy(), self.status == _UPPER)
        if status is not Status.OPTIMAL:
            return LpSolution(status, x if status is Status.ITER_LIMIT else None, math.nan, it, p.residual(x),
                              basis=basis, phase1_iterations=p1)
        y = self._btran(self.c[self.basic])
        d = self.c - self.AT @ y
        return LpSolution(status, x, p.objective(x), it, p.residual(x), y[:p.n_ub].copy(), y[p.n_ub:].copy(),
                          d[:self.n].copy(), basis, p1)


# ---------------------------------------------------------------------------
# text export

def _fmt(v: float) -> str:
    return repr(float(v))


def write_lp(problem: LpProblem, path) -> None:
    """Write the problem in CPLEX LP text format."""
    names = problem.var_names or [f"x{j}" for j in range(problem.n_vars)]
    names = [_lp_name(s) for s in names]
    lines = ["\\ generated by ctmrelax", "Minimize", " obj: " + _expr(problem.c, np.arange(problem.n_vars), names)]
    if problem.c0:
        lines[-1] += f" + {_fmt(problem.c0)} __const"
    lines.append("Subject To")
    for tag, A, b, sense, rnames in (("u", problem.A_ub, problem.b_ub, "<=", problem.ub_names),
                                     ("e", problem.A_eq, problem.b_eq, "=", problem.eq_names)):
        for r in range(A.shape[0]):
            s, e = A.indptr[r], A.indptr[r + 1]
            label = _lp_name(rnames[r]) if rnames else f"{tag}{r}"
            lines.append(f" {label}: {_expr(A.data[s:e], A.indices[s:e], names)} {sense} {_fmt(b[r])}")
    lines.append("Bounds")
    for j in range(problem.n_vars):
        lo, hi = problem.lo[j], problem.hi[j]
        if math.isinf(lo) and math.isinf(hi):
            lines.append(f" {names[j]} free")
        elif lo == hi:
            lines.append(f" {names[j]} = {_fmt(lo)}")
        else:
            left = "-inf" if math.isinf(lo) else _fmt(lo)
            right = "+inf" if math.isinf(hi) else _fmt(hi)
            lines.append(f" {left} <= {names[j]} <= {right}")
    if problem.c0:
        lines.append(" __const = 1")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _lp_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in s)


def _expr(vals, idx, names) -> str:
    parts = []
    for v, j in zip(vals, idx):
        if v == 0:
            continue
        sign = "-" if v < 0 else "+"
        parts.append(f"{sign} {_fmt(abs(v))} {names[j]}")
    if not parts:
        return "0 " + (names[0] if names else "")
    out = " ".join(parts)
    return out[2:] if out.startswith("+ ") else out
