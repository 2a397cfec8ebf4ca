"""Agents moving through a field of elastically tethered obstacles.

Particle simulation, continuum solver, linear stability analysis and
pattern comparison tools.
"""

from .params import ModelParams, apply_epsilon, continuum_params

__all__ = ["ModelParams", "apply_epsilon", "continuum_params"]
__version__ = "0.1.0"
