"""Worst-case local tests solved as a convex min-max problem.

Alias of :mod:`fdpsens.minimax`.
"""
from .minimax import *  # noqa: F401,F403
from .minimax import __all__  # noqa: F401
