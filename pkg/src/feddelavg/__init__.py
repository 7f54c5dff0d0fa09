"""Simulation and convergence analysis of federated learning with delayed, weighted model averaging."""

__version__ = "0.1.0"
