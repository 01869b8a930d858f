"""Potential-based SDE movement models: simulation and estimation."""
__version__ = "0.1.0"
