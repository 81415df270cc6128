"""Near-critical branching Brownian motion with absorption: simulation and numerical checks."""

__version__ = "0.1.0"
