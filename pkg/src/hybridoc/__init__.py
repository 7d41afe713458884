"""Optimal control of hybrid systems: simulation, minimum principle shooting,
grid dynamic programming and Riccati tracking."""

__version__ = "0.1.0"
