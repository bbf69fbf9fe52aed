"""Sparse-sensor field reconstruction with shallow recurrent decoder ensembles."""

__version__ = "0.1.0"
