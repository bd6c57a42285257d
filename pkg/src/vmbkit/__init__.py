"""Kinetic-to-fluid toolkit for the Vlasov-Maxwell-Boltzmann system."""

from .grids import RunConfig, SpatialGrid, Tolerances, VelocityGrid

__version__ = "0.1.0"

__all__ = ["RunConfig", "SpatialGrid", "Tolerances", "VelocityGrid", "__version__"]
