"""Matched designs, outcome matrices and score construction.

Alias of :mod:`fdpsens.design`.
"""
from .design import *  # noqa: F401,F403
from .design import __all__  # noqa: F401
