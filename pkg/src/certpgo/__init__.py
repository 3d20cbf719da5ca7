"""Distributed pose-graph optimization with global optimality certificates."""

__version__ = "0.1.0"
