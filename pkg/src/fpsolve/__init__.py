"""Stationary Fokker-Planck solvers: Monte Carlo data, grid optimisation and a mesh-free network."""
from ._accel import BACKEND
from .grid import DensityField, Domain, GridSpec
from .models import SdeModel, exact_solution, make_builtin

__version__ = "0.1.0"

__all__ = ["BACKEND", "DensityField", "Domain", "GridSpec", "SdeModel", "exact_solution", "make_builtin"]
