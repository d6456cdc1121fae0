"""Write the bundled ring-road scenarios (mainline table plus synthetic rush-hour demand)."""
import json
import sys
from pathlib import Path

LENGTH = [0.5, 0.6, 0.5, 0.5, 0.7, 0.5, 0.5, 0.7, 1.3, 0.5, 0.5,
          0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
CAP = [4410, 5364, 5500, 4950, 5257, 4311, 4680, 4950, 5167, 4878, 4320,
       4800, 4644, 5304, 4923, 4608, 5120, 5049, 4500, 5049, 7574]
BETA = [1, 1, 0.90, 1, 0.82, 1, 1, 1, 0.89, 1, 1,
        0.90, 1, 0.84, 1, 1, 0.90, 1, 0.92, 1]
V, RHO_BAR = 90.0, 250.0
# mainline cells that receive a metered onramp at their upstream end
RAMP_OUTLETS = [2, 4, 6, 8, 10, 13, 15, 18]
HOUR = 3600


def profile(base, peak, rise, hold, fall, end=5 * HOUR, step=600):
    """Piecewise-constant trapezoid sampled every ``step`` seconds."""
    pts = []
    t = 0
    while t < end:
        mid = t + step / 2
        if mid < rise[0]:
            r = base
        elif mid < rise[1]:
            r = base + (peak - base) * (mid - rise[0]) / (rise[1] - rise[0])
        elif mid < hold:
            r = peak
        elif mid < fall:
            r = peak + (base - peak) * (mid - hold) / (fall - hold)
        else:
            r = base
        pts.append([t, r])
        t += step
    return pts


def build(drop=None, scale=1.0):
    fds, cells, tr = {}, [], []
    for k in range(21):
        F = CAP[k]
        rc = F / V
        fds[f"m{k + 1}"] = {"type": "trapezoidal", "v": V, "w": round(1.05 * F / (RHO_BAR - rc), 6),
                            "f_d": F, "f_s": round(1.05 * F, 6), "rho_bar": RHO_BAR}
        cell = {"id": f"e{k + 1}", "length_km": LENGTH[k], "fd": f"m{k + 1}"}
        if k == 0:
            cell["infinite_capacity"] = True
        cells.append(cell)
        if k < 20:
            tr.append({"from": f"e{k + 1}", "to": f"e{k + 2}", "beta": BETA[k]})
    fds["ramp"] = {"type": "ramp_queue", "max_rate": 2000}
    asym = []
    for r, out in enumerate(RAMP_OUTLETS):
        lab = f"r{r + 1}"
        cells.append({"id": lab, "length_km": 0.4, "fd": "ramp", "infinite_capacity": True,
                      "queue_cap_cars": 50})
        tr.append({"from": lab, "to": f"e{out}", "beta": 1})
        asym.append({"outlet": f"e{out}", "ramp": lab})
    demand = {"e1": profile(2600, 4100, (0.5 * HOUR, 1.5 * HOUR), 3.0 * HOUR, 4.0 * HOUR)}
    ramp_peaks = [420, 380, 520, 300, 420, 380, 450, 500]
    for r, peak in enumerate(ramp_peaks):
        shift = 0.1 * HOUR * (r % 3)
        demand[f"r{r + 1}"] = profile(round(0.45 * peak), peak, (0.5 * HOUR + shift, 1.5 * HOUR + shift),
                                      3.0 * HOUR + shift, 4.0 * HOUR + shift)
    doc = {
        "name": "rocade" if drop is None else "rocade-capacity-drop",
        "description": "Ring-road segment: 21 mainline cells with 7 off-ramps and 8 metered onramps "
                       "(0.4 km stores capped at 50 cars). Synthetic five-hour rush-hour demand"
                       + ("." if drop is None else f", raised by {round((scale - 1) * 100)}%; capacity drop {drop}."),
        "units": {"time": "s"},
        "dt_s": 15,
        "horizon": {"duration": 5 * HOUR},
        "fds": fds,
        "cells": cells,
        "turning_rates": tr,
        "junctions": {"asymmetric": asym},
        "demand": demand,
        "solver": {"pwa_K": 32},
        "control": {"objective": "tts", "queue_caps": True},
    }
    for series in demand.values():
        for p in series:
            p[1] = round(p[1] * scale, 1)
    if drop is not None:
        doc["mpc"] = {"horizon_s": 600, "period_s": 120, "capacity_drop": drop, "epsilon": 0.1,
                      "bottleneck": "e10"}
    return doc


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "src/ctmrelax/scenarios")
    json.dump(build(), open(out / "rocade.json", "w"), indent=1)
    # the drop lifts free-flow capacity by 1/0.9, so demand is raised to reach it
    json.dump(build(0.1, scale=1.08), open(out / "rocade-capacity-drop.json", "w"), indent=1)
