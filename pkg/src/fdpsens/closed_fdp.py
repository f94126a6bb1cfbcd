"""Closed testing, FDP sensitivity sets and generalised sensitivity values.

Alias of :mod:`fdpsens.closed`.
"""
from .closed import *  # noqa: F401,F403
from .closed import __all__  # noqa: F401
