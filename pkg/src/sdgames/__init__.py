"""Least-squares Monte Carlo solvers for linear-quadratic stochastic
differential games: a two-player zero-sum game, a symmetric N-player game and
its mean field limit, with closed-form oracles and convergence experiments.
"""

__version__ = "0.1.0"

from .errors import InvalidArgument, IterationFailure, NumericalFailure
from .sim import GameSpec, Numerics, TimeGrid, make_time_grid

__all__ = [
    "GameSpec",
    "InvalidArgument",
    "IterationFailure",
    "Numerics",
    "NumericalFailure",
    "TimeGrid",
    "make_time_grid",
]
