"""Robust rigid-body assembly planning via contact-implicit optimal control.

Building blocks: smooth differentiable polytope collision detection with
exact first/second derivatives, frictionless time-stepping contact dynamics
with relaxed complementarity, a Cartesian impedance law, and a multi-scenario
trajectory optimizer driven by a homotopy of interior-point solves.
"""

__version__ = "0.1.0"
