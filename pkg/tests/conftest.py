"""Shared builders: hand-made small networks and the bundled scenarios (loaded once)."""
from __future__ import annotations

import functools

import numpy as np
import pytest

from ctmrelax.fundamental import Trapezoidal
from ctmrelax.network import Cell, Network
from ctmrelax.scenario import bundled_path, load


def triangular(v=100.0, w=25.0, rho_bar=250.0) -> Trapezoidal:
    cap = v * w * rho_bar / (v + w)
    return Trapezoidal(v, w, cap, cap, rho_bar)


def cell(k, tail, head, *, length=1.0, fd=None, infinite=False, rho0=0.0, cap=None, name=None):
    return Cell(k, tail, head, length, fd or triangular(), 1, infinite, rho0, cap, name or f"e{k + 1}")


def net(cells, beta, *, symmetric=(), asymmetric=None, subcritical=(), dt_s=15.0) -> Network:
    return Network(tuple(cells), beta, frozenset(symmetric), asymmetric or {}, frozenset(subcritical), dt_s / 3600)


def single_cell(rho0=0.0, length=1.0, dt_s=15.0) -> Network:
    return net([cell(0, 0, 1, length=length, infinite=True, rho0=rho0)], {}, dt_s=dt_s)


def diverge(rho=(40.0, 0.0, 0.0)) -> Network:
    """e1 splits half and half into e2 and e3; e3 never congests."""
    cells = [cell(0, 0, 1, infinite=True, rho0=rho[0]), cell(1, 1, 2, rho0=rho[1]),
             cell(2, 1, 3, infinite=True, rho0=rho[2])]
    return net(cells, {(1, 0): 0.5, (2, 0): 0.5})


def onramp_merge() -> Network:
    """Mainline e1 and ramp e2 meet at an asymmetric junction feeding e3."""
    cells = [cell(0, 0, 2, infinite=True), cell(1, 1, 2, infinite=True), cell(2, 2, 3)]
    return net(cells, {(2, 0): 1.0, (2, 1): 1.0}, asymmetric={2: 1})


def symmetric_merge(rho0=(0.0, 0.0, 0.0), dt_s=15.0) -> Network:
    cells = [cell(0, 0, 2, infinite=True, rho0=rho0[0]), cell(1, 1, 2, infinite=True, rho0=rho0[1]),
             cell(2, 2, 3, rho0=rho0[2])]
    return net(cells, {(2, 0): 1.0, (2, 1): 1.0}, symmetric={2}, dt_s=dt_s)


@functools.lru_cache(maxsize=None)
def bundled(name: str):
    return load(bundled_path(name))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def onramp_doc(steps=40, main=3500.0, ramp=1200.0, bottleneck_cap=3000.0):
    """Mainline and metered ramp merging upstream of a narrower cell; demand stops halfway."""
    half = steps * 15 / 2
    return {
        "name": "onramp",
        "dt_s": 15,
        "horizon": {"steps": steps},
        "fds": {
            "road": {"type": "triangular", "v": 100, "w": 25, "rho_bar": 250},
            "neck": {"type": "trapezoidal", "v": 100, "w": 25, "rho_bar": 250, "f_d": bottleneck_cap,
                     "f_s": bottleneck_cap},
            "ramp": {"type": "ramp_queue", "max_rate": 2000},
        },
        "cells": [
            {"id": "e1", "length_km": 0.5, "fd": "road", "infinite_capacity": True},
            {"id": "e2", "length_km": 0.5, "fd": "ramp", "infinite_capacity": True},
            {"id": "e3", "length_km": 0.5, "fd": "road"},
            {"id": "e4", "length_km": 0.5, "fd": "neck"},
            {"id": "e5", "length_km": 0.5, "fd": "road"},
        ],
        "turning_rates": [
            {"from": "e1", "to": "e3", "beta": 1},
            {"from": "e2", "to": "e3", "beta": 1},
            {"from": "e3", "to": "e4", "beta": 1},
            {"from": "e4", "to": "e5", "beta": 1},
        ],
        "junctions": {"asymmetric": [{"outlet": "e3", "ramp": "e2"}]},
        "demand": {"e1": [[0, main], [half, 0]], "e2": [[0, ramp], [half, 0]]},
    }


def onramp_scenario(**kw):
    from ctmrelax.scenario import parse
    return parse(onramp_doc(**kw))
