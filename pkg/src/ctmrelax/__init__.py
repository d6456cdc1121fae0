"""Cell transmission model networks with controlled merges: simulation, exact LP relaxation, MPC."""

__version__ = "0.1.0"
