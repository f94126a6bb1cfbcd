"""The bounded-odds sensitivity model and worst-case single-outcome inference.

Alias of :mod:`fdpsens.sensitivity`.
"""
from .sensitivity import *  # noqa: F401,F403
from .sensitivity import __all__  # noqa: F401
