"""Numerical experiments for 3D magnetic Schroedinger operators
H = -Delta + i(A.grad + div A) + V on periodic spectral grids."""
from .grid import GridSpec, Field, make_grid
from .potentials import ModelParams, PotentialModel, build_model, make_gaussian_model, zero_model

__version__ = "0.1.0"

__all__ = ["GridSpec", "Field", "make_grid", "ModelParams", "PotentialModel", "build_model",
           "make_gaussian_model", "zero_model"]
