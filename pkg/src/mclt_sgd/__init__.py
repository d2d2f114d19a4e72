"""Simulation and bound-evaluation toolkit for normal approximation of
martingales and averaged stochastic gradient descent."""

__version__ = "0.1.0"

from .errors import MCLTError  # noqa: F401
