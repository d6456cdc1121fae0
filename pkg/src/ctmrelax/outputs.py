"""Plot-ready files: per-cell trajectory rows, a density contour grid and a JSON report."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .sim import Trajectory

TRAJECTORY_COLUMNS = ("t_s", "cell", "density_cars_per_km", "flow_cars_per_h", "input_flow")
CONTOUR_COLUMNS = ("t_s", "cell_index", "density")


def fmt(v: float) -> str:
    """Nine significant digits; empty for NaN so blank cells mean 'not applicable'."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.9g}"


def _times(traj: Trajectory) -> np.ndarray:
    return np.arange(traj.T + 1) * traj.dt * 3600


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    """One row per (time, cell); flows and inputs are blank at the final time."""
    labels = [c.label for c in traj.network.cells]
    ts = _times(traj)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TRAJECTORY_COLUMNS)
        for t in range(traj.T + 1):
            for e, lab in enumerate(labels):
                flow = traj.phi[t, e] if t < traj.T else math.nan
                inp = traj.inputs[t, e] if t < traj.T else math.nan
                out.writerow((fmt(ts[t]), lab, fmt(traj.rho[t, e]), fmt(flow), fmt(inp)))


def write_contour(traj: Trajectory, path: str | Path) -> None:
    ts = _times(traj)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CONTOUR_COLUMNS)
        for t in range(traj.T + 1):
            for e in range(traj.network.n):
                out.writerow((fmt(ts[t]), e, fmt(traj.rho[t, e])))


def write_inputs(inputs: np.ndarray, labels: list[str], dt_s: float, path: str | Path) -> None:
    """Controlled flows only, in the trajectory column layout so ``read_inputs`` can replay them."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("t_s", "cell", "input_flow"))
        for t in range(inputs.shape[0]):
            for e, lab in enumerate(labels):
                if not math.isnan(inputs[t, e]):
                    out.writerow((fmt(t * dt_s), lab, fmt(inputs[t, e])))


def read_inputs(path: str | Path, labels: list[str], T: int, dt_s: float) -> np.ndarray:
    """Controlled flows from a trajectory-style CSV (t_s, cell, input_flow); missing entries stay NaN."""
    index = {lab: k for k, lab in enumerate(labels)}
    u = np.full((T, len(labels)), np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if not row.get("input_flow"):
                continue
            t = int(round(float(row["t_s"]) / dt_s))
            if row["cell"] not in index:
                raise ValueError(f"unknown cell {row['cell']!r} in {path}")
            if 0 <= t < T:
                u[t, index[row["cell"]]] = float(row["input_flow"])
    return u


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_clean(report), indent=1, sort_keys=True) + "\n")


def write_bundle(traj: Trajectory, out: str | Path, report: dict | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(traj, out / "trajectory.csv")
    write_contour(traj, out / "contour.csv")
    if report is not None:
        write_report(report, out / "report.json")
    return out
