"""Solver and optimality certificates for the square monopolist screening problem."""

__version__ = "0.1.0"
