"""Fundamental diagrams: demand/supply curve pairs for a single cell.

Units throughout are cars/km for densities, cars/h for flows and km/h for
slopes.  Every curve is evaluated with numpy so scalars and arrays both work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

# Supply of an infinite-capacity cell.  Kept as a named value so callers test
# for it explicitly instead of relying on some large number.
UNBOUNDED = math.inf

_CONCAVITY_RTOL = 1e-9


class FundamentalDiagramError(ValueError):
    pass


class DomainError(FundamentalDiagramError):
    pass


def _as_array(rho):
    return np.asarray(rho, dtype=float)


def _unwrap(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class Trapezoidal:
    """d = min(v*rho, f_d), s = min(f_s, w*(rho_bar - rho)).

    ``rho_bar = inf`` describes a cell whose supply is never binding.
    """

    v: float
    w: float
    f_d: float
    f_s: float
    rho_bar: float

    def __post_init__(self):
        if not (self.v > 0 and self.f_d > 0):
            raise FundamentalDiagramError("trapezoidal fd needs v > 0 and f_d > 0")
        if not math.isinf(self.rho_bar):
            if not (self.w > 0 and self.f_s > 0 and self.rho_bar > 0):
                raise FundamentalDiagramError("trapezoidal fd needs w, f_s, rho_bar > 0")

    concave = True

    def demand(self, rho):
        if isinstance(rho, float):
            return min(self.v * rho, self.f_d)
        r = _as_array(rho)
        return _unwrap(np.minimum(self.v * r, self.f_d), rho)

    def supply(self, rho):
        if isinstance(rho, float) and not math.isinf(self.rho_bar):
            return min(self.f_s, self.w * (self.rho_bar - rho))
        r = _as_array(rho)
        if math.isinf(self.rho_bar):
            return _unwrap(np.full_like(r, UNBOUNDED), rho)
        return _unwrap(np.minimum(self.f_s, self.w * (self.rho_bar - r)), rho)

    @property
    def demand_cap(self) -> float:
        return self.f_d

    @property
    def critical_density(self) -> float:
        return self.f_d / self.v

    def lipschitz(self) -> tuple[float, float]:
        return (self.v, 0.0 if math.isinf(self.rho_bar) else self.w)

    def scaled(self, n: float) -> "Trapezoidal":
        return Trapezoidal(self.v, self.w, self.f_d * n, self.f_s * n, self.rho_bar * n)


@dataclass(frozen=True)
class Pwa:
    """Piecewise-affine curves given by breakpoints.

    Demand is interpolated from (0, 0) and held constant past its last
    breakpoint.  Supply is held constant before its first breakpoint and
    reaches zero at its last one, which defines rho_bar.  ``supply_pts=None``
    means the supply is unbounded.
    """

    demand_pts: tuple[tuple[float, float], ...]
    supply_pts: tuple[tuple[float, float], ...] | None
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        dp = tuple((float(a), float(b)) for a, b in self.demand_pts)
        object.__setattr__(self, "demand_pts", dp)
        if self.supply_pts is not None:
            sp = tuple((float(a), float(b)) for a, b in self.supply_pts)
            object.__setattr__(self, "supply_pts", sp)
        if len(dp) < 2 or dp[0] != (0.0, 0.0):
            raise FundamentalDiagramError("demand breakpoints must start at (0, 0)")
        if self.supply_pts is not None:
            sp = self.supply_pts
            if len(sp) < 2 or sp[-1][1] != 0.0:
                raise FundamentalDiagramError("supply breakpoints must end at (rho_bar, 0)")
        if self.check:
            self._validate()

    def _validate(self):
        xs, ys = np.array(self.demand_pts).T
        if np.any(np.diff(xs) <= 0):
            raise FundamentalDiagramError("demand breakpoints must be strictly increasing in rho")
        slopes = np.diff(ys) / np.diff(xs)
        if np.any(slopes < -1e-12):
            raise FundamentalDiagramError("demand must be nondecreasing")
        if np.any(np.diff(slopes) > _CONCAVITY_RTOL * max(1.0, np.abs(slopes).max())):
            raise FundamentalDiagramError("demand must be concave")
        if self.supply_pts is not None:
            xs, ys = np.array(self.supply_pts).T
            if xs[0] < 0 or np.any(np.diff(xs) <= 0):
                raise FundamentalDiagramError("supply breakpoints must be strictly increasing in rho")
            slopes = np.diff(ys) / np.diff(xs)
            if np.any(slopes > 1e-12):
                raise FundamentalDiagramError("supply must be nonincreasing")
            if np.any(np.diff(slopes) > _CONCAVITY_RTOL * max(1.0, np.abs(slopes).max())):
                raise FundamentalDiagramError("supply must be concave")

    concave = True

    @property
    def rho_bar(self) -> float:
        if self.supply_pts is None:
            return math.inf
        return self.supply_pts[-1][0]

    @property
    def demand_cap(self) -> float:
        return self.demand_pts[-1][1]

    @property
    def critical_density(self) -> float:
        cap = self.demand_cap
        for x, y in self.demand_pts:
            if y >= cap:
                return x
        return self.demand_pts[-1][0]

    def demand(self, rho):
        xs, ys = zip(*self.demand_pts)
        return _unwrap(np.interp(_as_array(rho), xs, ys), rho)

    def supply(self, rho):
        r = _as_array(rho)
        if self.supply_pts is None:
            return _unwrap(np.full_like(r, UNBOUNDED), rho)
        xs, ys = zip(*self.supply_pts)
        return _unwrap(np.interp(r, xs, ys), rho)

    def lipschitz(self) -> tuple[float, float]:
        (x0, y0), (x1, y1) = self.demand_pts[:2]
        gd = (y1 - y0) / (x1 - x0)
        if self.supply_pts is None:
            return (gd, 0.0)
        (x0, y0), (x1, y1) = self.supply_pts[-2:]
        return (gd, abs((y1 - y0) / (x1 - x0)))

    def demand_lines(self) -> list[tuple[float, float]]:
        """(slope, intercept) pairs whose pointwise minimum is the demand."""
        lines = _segments(self.demand_pts)
        if lines[-1][0] != 0.0:
            lines.append((0.0, self.demand_cap))
        return _dedupe(lines)

    def supply_lines(self) -> list[tuple[float, float]]:
        if self.supply_pts is None:
            return []
        lines = _segments(self.supply_pts)
        if self.supply_pts[0][0] > 0:
            lines.insert(0, (0.0, self.supply_pts[0][1]))
        return _dedupe(lines)

    def scaled(self, n: float) -> "Pwa":
        dp = tuple((x * n, y * n) for x, y in self.demand_pts)
        sp = None if self.supply_pts is None else tuple((x * n, y * n) for x, y in self.supply_pts)
        return Pwa(dp, sp)


def _segments(pts):
    out = []
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        a = (y1 - y0) / (x1 - x0)
        out.append((a, y0 - a * x0))
    return out


def _dedupe(lines):
    kept: list[tuple[float, float]] = []
    for a, b in lines:
        if any(abs(a - a2) <= 1e-12 * max(1.0, abs(a)) and abs(b - b2) <= 1e-9 * max(1.0, abs(b))
               for a2, b2 in kept):
            continue
        kept.append((a, b))
    return kept


@dataclass(frozen=True)
class CubicHermite:
    """Cubic demand on [0, rho_c] then flat; flat supply then cubic on [rho_c, rho_bar].

    Coefficients are ordered highest power first, (c3, c2, c1, c0), in the
    density variable itself.
    """

    d_coeffs: tuple[float, float, float, float]
    f_d: float
    s_coeffs: tuple[float, float, float, float]
    f_s: float
    rho_c: float
    rho_bar: float

    def __post_init__(self):
        object.__setattr__(self, "d_coeffs", tuple(float(c) for c in self.d_coeffs))
        object.__setattr__(self, "s_coeffs", tuple(float(c) for c in self.s_coeffs))
        if not (0 < self.rho_c < self.rho_bar):
            raise FundamentalDiagramError("need 0 < rho_c < rho_bar")
        for coeffs, lo, hi, what in ((self.d_coeffs, 0.0, self.rho_c, "demand"),
                                     (self.s_coeffs, self.rho_c, self.rho_bar, "supply")):
            d2 = (6 * coeffs[0] * np.array([lo, hi]) + 2 * coeffs[1])
            scale = max(1.0, abs(coeffs[2]) / max(hi - lo, 1e-12))
            if np.any(d2 > _CONCAVITY_RTOL * scale):
                raise FundamentalDiagramError(f"{what} cubic is not concave on its interval")

    concave = True

    @property
    def demand_cap(self) -> float:
        return self.f_d

    @property
    def critical_density(self) -> float:
        return self.rho_c

    def demand(self, rho):
        if isinstance(rho, float):
            if rho >= self.rho_c:
                return self.f_d
            c3, c2, c1, c0 = self.d_coeffs
            return ((c3 * rho + c2) * rho + c1) * rho + c0
        r = _as_array(rho)
        inner = np.polyval(self.d_coeffs, np.minimum(r, self.rho_c))
        return _unwrap(np.where(r < self.rho_c, inner, self.f_d), rho)

    def supply(self, rho):
        if isinstance(rho, float):
            if rho <= self.rho_c:
                return self.f_s
            c3, c2, c1, c0 = self.s_coeffs
            return max(((c3 * rho + c2) * rho + c1) * rho + c0, 0.0)
        r = _as_array(rho)
        inner = np.polyval(self.s_coeffs, np.maximum(r, self.rho_c))
        # the cubic is zero at rho_bar only up to rounding
        return _unwrap(np.where(r <= self.rho_c, self.f_s, np.maximum(inner, 0.0)), rho)

    def lipschitz(self) -> tuple[float, float]:
        d3, d2, d1, _ = self.d_coeffs
        s3, s2, s1, _ = self.s_coeffs
        rb = self.rho_bar
        return (d1, abs(3 * s3 * rb * rb + 2 * s2 * rb + s1))

    def scaled(self, n: float) -> "CubicHermite":
        d3, d2, d1, d0 = self.d_coeffs
        s3, s2, s1, s0 = self.s_coeffs
        return CubicHermite((d3 / n**2, d2 / n, d1, d0 * n), self.f_d * n,
                            (s3 / n**2, s2 / n, s1, s0 * n), self.f_s * n,
                            self.rho_c * n, self.rho_bar * n)


@dataclass(frozen=True)
class CapacityDrop:
    """Demand follows ``base`` up to rho_c and drops to (1 - fraction) of the base cap above it."""

    base: Pwa
    drop_fraction: float
    rho_c: float

    def __post_init__(self):
        if not (0 < self.drop_fraction < 1):
            raise FundamentalDiagramError("drop fraction must lie in (0, 1)")

    concave = False

    @property
    def rho_bar(self) -> float:
        return self.base.rho_bar

    @property
    def demand_cap(self) -> float:
        return self.base.demand_cap

    @property
    def congested_cap(self) -> float:
        return (1.0 - self.drop_fraction) * self.base.demand_cap

    @property
    def critical_density(self) -> float:
        return self.rho_c

    def demand(self, rho):
        r = _as_array(rho)
        free = _as_array(self.base.demand(r))
        return _unwrap(np.where(r <= self.rho_c, free, self.congested_cap), rho)

    def supply(self, rho):
        return self.base.supply(rho)

    def lipschitz(self) -> tuple[float, float]:
        # The jump at rho_c is downward, so the slopes of the continuous
        # pieces are what bounds the per-step density change.
        return self.base.lipschitz()

    def scaled(self, n: float) -> "CapacityDrop":
        return CapacityDrop(self.base.scaled(n), self.drop_fraction, self.rho_c * n)


FundamentalDiagram = Union[Trapezoidal, Pwa, CubicHermite, CapacityDrop]


def eval_demand(fd: FundamentalDiagram, rho, infinite_capacity: bool = False):
    _check_domain(fd, rho, infinite_capacity)
    return fd.demand(rho)


def eval_supply(fd: FundamentalDiagram, rho, infinite_capacity: bool = False):
    _check_domain(fd, rho, infinite_capacity)
    if infinite_capacity:
        return _unwrap(np.full_like(_as_array(rho), UNBOUNDED), rho)
    return fd.supply(rho)


def _check_domain(fd, rho, infinite_capacity):
    r = _as_array(rho)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError("density must be nonnegative")
    if not infinite_capacity and np.any(r > fd.rho_bar * (1 + 1e-12)):
        raise DomainError(f"density exceeds jam density {fd.rho_bar}")


def hermite_cubic_demand(v0: float, rho_c: float, F: float,
                         end_slope: float = 0.0) -> tuple[float, float, float, float]:
    """Cubic with d(0)=0, d'(0)=v0, d(rho_c)=F, d'(rho_c)=end_slope.

    Raises if the cubic is not concave on [0, rho_c].
    """
    if not (v0 > 0 and rho_c > 0 and F > 0):
        raise FundamentalDiagramError("need v0, rho_c, F > 0")
    # d = a r^3 + b r^2 + v0 r; two conditions left for (a, b)
    r = rho_c
    rhs1 = F - v0 * r
    rhs2 = end_slope - v0
    det = r**3 * 2 * r - r**2 * 3 * r**2
    a = (rhs1 * 2 * r - r**2 * rhs2) / det
    b = (r**3 * rhs2 - 3 * r**2 * rhs1) / det
    coeffs = (a, b, float(v0), 0.0)
    _require_concave(coeffs, 0.0, rho_c, "demand")
    return coeffs


def hermite_cubic_supply(rho_c: float, F: float, rho_bar: float, w_end: float,
                         start_slope: float = 0.0) -> tuple[float, float, float, float]:
    """Cubic with s(rho_c)=F, s'(rho_c)=start_slope, s(rho_bar)=0, s'(rho_bar)=w_end.

    ``w_end`` is the (negative) slope at the jam density.
    """
    if not (rho_bar > rho_c > 0 and F > 0):
        raise FundamentalDiagramError("need rho_bar > rho_c > 0 and F > 0")
    L = rho_bar - rho_c
    # local form s = F + g x + p x^2 + q x^3 with x = rho - rho_c
    g = start_slope
    rhs1 = -F - g * L
    rhs2 = w_end - g
    q = (rhs2 * L - 2 * rhs1) / L**3
    p = (rhs1 - q * L**3) / L**2
    # expand around rho = 0
    c = rho_c
    coeffs = (q, p - 3 * q * c, g - 2 * p * c + 3 * q * c * c, F - g * c + p * c * c - q * c**3)
    # concavity of the local form at both ends (exact, avoids the expanded rounding)
    for x in (0.0, L):
        if 2 * p + 6 * q * x > _CONCAVITY_RTOL * max(1.0, abs(w_end) / L):
            raise FundamentalDiagramError("supply cubic is not concave on [rho_c, rho_bar]")
    return coeffs


def _require_concave(coeffs, lo, hi, what):
    scale = max(1.0, abs(coeffs[2]) / max(hi - lo, 1e-12))
    for x in (lo, hi):
        if 6 * coeffs[0] * x + 2 * coeffs[1] > _CONCAVITY_RTOL * scale:
            raise FundamentalDiagramError(f"{what} cubic is not concave on [{lo}, {hi}]")


def cubic_hermite(v0: float, rho_c: float, F: float, rho_bar: float, w_end: float) -> CubicHermite:
    """Cubic-Hermite diagram with a shared capacity F for demand and supply."""
    return CubicHermite(hermite_cubic_demand(v0, rho_c, F), F,
                        hermite_cubic_supply(rho_c, F, rho_bar, w_end), F, rho_c, rho_bar)


def pwa_discretize(fd: FundamentalDiagram, K: int = 32) -> Pwa:
    """Secant interpolation at K+1 equally spaced densities on every curved piece."""
    if K < 2:
        raise FundamentalDiagramError("K must be at least 2")
    if isinstance(fd, CapacityDrop):
        raise FundamentalDiagramError("capacity-drop diagrams are not concave")
    if isinstance(fd, Pwa):
        return fd
    if isinstance(fd, Trapezoidal):
        dp = ((0.0, 0.0), (fd.f_d / fd.v, fd.f_d))
        if math.isinf(fd.rho_bar):
            return Pwa(dp, None)
        knee = fd.rho_bar - fd.f_s / fd.w
        if knee <= 0:
            return Pwa(dp, ((0.0, fd.w * fd.rho_bar), (fd.rho_bar, 0.0)))
        return Pwa(dp, ((0.0, fd.f_s), (knee, fd.f_s), (fd.rho_bar, 0.0)))
    if isinstance(fd, CubicHermite):
        xs = np.linspace(0.0, fd.rho_c, K + 1)
        ys = np.polyval(fd.d_coeffs, xs)
        ys[0], ys[-1] = 0.0, fd.f_d
        dp = tuple(zip(xs.tolist(), ys.tolist()))
        xs = np.linspace(fd.rho_c, fd.rho_bar, K + 1)
        ys = np.polyval(fd.s_coeffs, xs)
        ys[0], ys[-1] = fd.f_s, 0.0
        sp = ((0.0, fd.f_s),) + tuple(zip(xs.tolist(), ys.tolist()))
        return Pwa(dp, sp)
    raise FundamentalDiagramError(f"cannot discretize {type(fd).__name__}")


def lipschitz_constants(fd: FundamentalDiagram) -> tuple[float, float]:
    return fd.lipschitz()


def scale_lanes(fd: FundamentalDiagram, n: int) -> FundamentalDiagram:
    if int(n) != n or n < 1:
        raise FundamentalDiagramError("lane count must be a positive integer")
    return fd if n == 1 else fd.scaled(n)


def apply_capacity_drop(fd: FundamentalDiagram, fraction: float) -> CapacityDrop:
    """Raise the free-flow cap to cap/(1-fraction) and drop back to cap once congested."""
    if not (0 < fraction < 1):
        raise FundamentalDiagramError("drop fraction must lie in (0, 1)")
    if isinstance(fd, CubicHermite):
        raise FundamentalDiagramError("capacity drop is defined for piecewise-affine diagrams")
    base = pwa_discretize(fd) if isinstance(fd, Trapezoidal) else fd
    cap = base.demand_cap
    raised = cap / (1.0 - fraction)
    rising = [(x, y) for x, y in base.demand_pts if y < cap]
    # extend the last rising segment until it meets the raised cap
    (x0, y0), (x1, y1) = base.demand_pts[len(rising) - 1], base.demand_pts[len(rising)]
    slope = (y1 - y0) / (x1 - x0)
    knee = x0 + (raised - y0) / slope
    new_base = Pwa(tuple(rising) + ((knee, raised),), base.supply_pts)
    return CapacityDrop(new_base, fraction, knee)


def ramp_queue(length_km: float, dt_h: float, max_rate: float) -> Trapezoidal:
    """Onramp store: everything queued can leave within one step, up to ``max_rate``."""
    return Trapezoidal(length_km / dt_h, 0.0, max_rate, UNBOUNDED, math.inf)


def fd_from_spec(spec: dict) -> FundamentalDiagram:
    kind = spec["type"]
    if kind == "trapezoidal":
        return Trapezoidal(spec["v"], spec["w"], spec["f_d"], spec["f_s"], spec["rho_bar"])
    if kind == "triangular":
        v, w, rb = spec["v"], spec["w"], spec["rho_bar"]
        cap = v * w * rb / (v + w)
        return Trapezoidal(v, w, cap, cap, rb)
    if kind == "pwa":
        sp = spec.get("supply")
        return Pwa(tuple(map(tuple, spec["demand"])), None if sp is None else tuple(map(tuple, sp)))
    if kind == "cubic_hermite":
        return cubic_hermite(spec["v0"], spec["rho_c"], spec["capacity"], spec["rho_bar"], spec["w_end"])
    raise FundamentalDiagramError(f"unknown fundamental diagram type {kind!r}")


def secant_gap(fd: FundamentalDiagram, pwa: Pwa, samples: int = 10_000) -> tuple[float, float]:
    """Largest (true - discretized) gap for demand and supply on a dense grid."""
    rb = fd.rho_bar if not math.isinf(fd.rho_bar) else 2 * pwa.demand_pts[-1][0]
    r = np.linspace(0.0, rb, samples)
    gd = float(np.max(fd.demand(r) - pwa.demand(r)))
    gs = 0.0 if math.isinf(fd.rho_bar) else float(np.max(fd.supply(r) - pwa.supply(r)))
    return gd, gs


Breakpoints = Sequence[tuple[float, float]]
