"""Sparse multitask neural solvers for coupled PDEs with disjoint priors."""

__version__ = "0.1.0"
